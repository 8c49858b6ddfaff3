s = 'it\'s'
t = "say \"hi\""
print(s, t)
