from .runner import RESULT_FD, SENTINEL, main, shim_run

__all__ = ["RESULT_FD", "SENTINEL", "main", "shim_run"]
__version__ = "0.1.0"
