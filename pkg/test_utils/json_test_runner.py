"""Running tests with a JSON report"""

import inspect
import json
import sys
import time
from unittest import result
from unittest.signals import registerResult

import test_utils.decorators as decorators

DECORATOR_CLASSES = [
    klass for _name, klass in inspect.getmembers(decorators)
    if (
        inspect.isclass(klass)
        and issubclass(klass, decorators.Decorator)
        and klass != decorators.Decorator
    )
]


class JSONTestResult(result.TestResult):
    """A test result class that collects one JSON record per test.

    Used by JSONTestRunner.
    """
    def __init__(self, stream, descriptions, verbosity, results):
        super().__init__(stream, descriptions, verbosity)
        self.descriptions = descriptions
        self.results = results
        self._started = {}

    def getDescription(self, test):
        doc_first_line = test.shortDescription()
        if self.descriptions and doc_first_line:
            return doc_first_line
        return str(test)

    def getOutput(self):
        if self.buffer:
            out = self._stdout_buffer.getvalue()
            err = self._stderr_buffer.getvalue()
            if err:
                if not out.endswith('\n'):
                    out += '\n'
                out += err
            return out

    def startTest(self, test):
        self._started[test.id()] = time.perf_counter()
        super().startTest(test)

    def buildResult(self, test, status, err=None):
        output = self.getOutput() or ""
        record = {
            "name": self.getDescription(test),
            "status": status,
            "ok": status in ("passed", "skipped"),
            "seconds": round(time.perf_counter() - self._started.get(test.id(), time.perf_counter()), 3),
        }
        if err is not None:
            record["feedback"] = output + self._exc_info_to_string(err, test)
        method = getattr(test, test._testMethodName, None)
        for dec in DECORATOR_CLASSES:
            val = getattr(method, dec.get_attr_name(), None)
            dec.change_result(val, record, output, err)
        return record

    def addSuccess(self, test):
        super().addSuccess(test)
        self.results.append(self.buildResult(test, "passed"))

    def addError(self, test, err):
        super().addError(test, err)
        # Prevent output from being printed to stdout on failure
        self._mirrorOutput = False
        self.results.append(self.buildResult(test, "error", err))

    def addFailure(self, test, err):
        super().addFailure(test, err)
        self._mirrorOutput = False
        self.results.append(self.buildResult(test, "failed", err))

    def addSkip(self, test, reason):
        super().addSkip(test, reason)
        record = self.buildResult(test, "skipped")
        record["reason"] = reason
        self.results.append(record)


class JSONTestRunner(object):
    """A test runner class that displays results in JSON form.
    """
    resultclass = JSONTestResult

    def __init__(self, stream=sys.stdout, descriptions=True, verbosity=1, failfast=False, buffer=True):
        self.stream = stream
        self.descriptions = descriptions
        self.verbosity = verbosity
        self.failfast = failfast
        self.buffer = buffer
        self.json_data = {
            "testcases": [],
        }

    def _makeResult(self):
        return self.resultclass(self.stream, self.descriptions, self.verbosity,
                                self.json_data["testcases"])

    def run(self, test):
        "Run the given test case or test suite."
        result = self._makeResult()
        registerResult(result)
        result.failfast = self.failfast
        result.buffer = self.buffer
        startTestRun = getattr(result, 'startTestRun', None)
        if startTestRun is not None:
            startTestRun()
        try:
            test(result)
        finally:
            stopTestRun = getattr(result, 'stopTestRun', None)
            if stopTestRun is not None:
                stopTestRun()

        cases = self.json_data["testcases"]
        cases.sort(key=lambda x: x["name"])
        self.json_data["summary"] = {
            status: sum(1 for c in cases if c["status"] == status)
            for status in ("passed", "failed", "error", "skipped")
        }
        json.dump(self.json_data, self.stream, indent=4)
        self.stream.write('\n')
        return result
