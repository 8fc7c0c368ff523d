# Empty __init__.py to make config a package
