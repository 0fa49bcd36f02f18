# adacare/models/__init__.py
