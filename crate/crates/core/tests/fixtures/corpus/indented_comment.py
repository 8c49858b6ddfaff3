def f():
    x = 1
    # inner comment
    return x

# outer comment
print(f())
