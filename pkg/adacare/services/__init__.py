# adacare/services/__init__.py
