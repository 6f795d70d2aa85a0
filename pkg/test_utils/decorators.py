import abc
import os
import unittest

SLOW_TESTS_ENV = "DETAILER_SLOW_TESTS"


class InvalidValueException(Exception):
    pass


class Decorator(abc.ABC):

    def __init__(self, v) -> None:
        res = self.validate(v)
        if res:
            raise InvalidValueException(res)
        self.v = v

    def validate(self, v):
        return None

    def __call__(self, func):
        setattr(func, self.get_attr_name(), self.v)
        return func

    @classmethod
    def get_attr_name(cls):
        return f"__{cls.__name__}__"

    @classmethod
    @abc.abstractmethod
    def change_result(cls, saved_value, results: dict, output: str, err):
        """
        Apply your change to the test result.
        This method is called *regardless* of whether you applied the decorator or not.

        If you did not apply the decorator, saved_value will be none.
        """
        pass


class number(Decorator):
    """
    Task number of a test, e.g. @number("3.2"). run_tests.py filters on its prefix.
    """

    def validate(self, v):
        if not isinstance(v, str) or not v:
            return "Number should be a non-empty string like '3.2'."

    @classmethod
    def change_result(cls, saved_value, results: dict, output: str, err):
        if saved_value is not None:
            results["name"] = "{}: {}".format(str(saved_value), results["name"])


class slow(Decorator):
    """
    Long seeded experiment. Skipped unless DETAILER_SLOW_TESTS=1.

    Usage: @slow()
    """

    def __init__(self) -> None:
        self.v = True

    def __call__(self, func):
        func = super().__call__(func)
        return unittest.skipUnless(slow_tests_enabled(), f"set {SLOW_TESTS_ENV}=1 to run")(func)

    @classmethod
    def change_result(cls, saved_value, results: dict, output: str, err):
        if saved_value is not None:
            results["name"] = "[SLOW] {}".format(results["name"])


def slow_tests_enabled() -> bool:
    return os.environ.get(SLOW_TESTS_ENV) == "1"
