import json

import jsonschema
import numpy as np
import pytest
import referencing
from hypothesis import HealthCheck, settings

from hypocert.cli import load_schema

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def validate(doc: dict, name: str) -> None:
    registry = referencing.Registry().with_resource(
        "certificate.schema.json", referencing.Resource.from_contents(load_schema("certificate"))
    )
    jsonschema.Draft202012Validator(load_schema(name), registry=registry).validate(doc)


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
