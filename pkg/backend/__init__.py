# This file makes the backend directory a Python package
