# adacare/utils/__init__.py
