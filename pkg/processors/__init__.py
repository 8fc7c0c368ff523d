# Empty __init__.py to make processors a package
