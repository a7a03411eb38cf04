import logging

import nox  # noqa
from pathlib import Path  # noqa


pkg_name = "emattn"

PYTHONS = ["3.8", "3.9", "3.10", "3.11"]

# set the default activated sessions, minimal for CI
nox.options.sessions = ["tests", "flake8"]
nox.options.reuse_existing_virtualenvs = True  # this can be done using -r

nox_logger = logging.getLogger("nox")


class Folders:
    root = Path(__file__).parent
    ci_tools = root / "ci_tools"
    reports_root = root / "docs" / "reports"
    test_reports = reports_root / "junit"
    test_xml = test_reports / "junit.xml"
    coverage_reports = reports_root / "coverage"
    coverage_xml = coverage_reports / "coverage.xml"
    flake8_reports = reports_root / "flake8"


@nox.session(python=PYTHONS)
def tests(session):
    """Run the test suite. Pass '-- coverage' to measure coverage, '-- fast' to skip the slow training runs."""

    session.install("-e", ".[test]")

    pytest_args = ["--cache-clear", "--junitxml=%s" % Folders.test_xml, "-v", "tests/"]
    if "fast" in session.posargs:
        pytest_args = ["-m", "not slow"] + pytest_args

    if "coverage" in session.posargs:
        session.install("coverage")
        session.run("coverage", "run", "--source", "src/%s" % pkg_name, "-m", "pytest", *pytest_args)
        session.run("coverage", "report")
        session.run("coverage", "xml", "-o", str(Folders.coverage_xml))
    else:
        session.run("python", "-m", "pytest", *pytest_args)


@nox.session(python=PYTHONS[-1])
def flake8(session):
    """Launch flake8 qualimetry."""

    session.install("-r", str(Folders.ci_tools / "flake8-requirements.txt"))
    session.install(".")

    session.cd("src")
    # Options are set in `setup.cfg` file
    session.run("flake8", pkg_name, "--statistics")


@nox.session(python=PYTHONS[-1])
def docs(session):
    """Generates the doc and serves it on a local http server. Pass '-- build' to build statically instead."""

    session.install("mkdocs-material", "mkdocs", "pymdown-extensions", "pygments")

    if session.posargs:
        # use posargs instead of "serve"
        session.run("mkdocs", *session.posargs)
    else:
        session.run("mkdocs", "serve")
