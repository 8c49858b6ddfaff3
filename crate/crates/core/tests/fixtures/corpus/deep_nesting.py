for a in range(2):
    for b in range(2):
        if a == b:
            try:
                print(a, b)
            except Exception:
                pass
print('done')
