name = 'x'
msg = f'hello {name} {1 + 2}'
print(msg)
