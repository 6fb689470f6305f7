def flood(times):
    for _ in range(times):
        print("x" * 65536)
    return times

input = {"times": 4}
output = flood(**input)
print(output)
