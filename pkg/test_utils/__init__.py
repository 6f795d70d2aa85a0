# Test decorators and a JSON result runner used by run_tests.py.
