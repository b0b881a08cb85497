import json
import os
import pathlib
import re
import subprocess

import jsonschema
import pytest

ROOT = pathlib.Path(__file__).resolve().parents[2]
CONFIG = ROOT / "config" / "default.json"


def cryoscan_bin():
    path = os.environ.get("CRYOSCAN_BIN", str(ROOT / "build" / "tools" / "cryoscan"))
    if not os.path.exists(path):
        pytest.skip(f"cryoscan binary not found at {path}")
    return path


@pytest.fixture(scope="session")
def binary():
    return cryoscan_bin()


@pytest.fixture(scope="session")
def schema():
    doc = json.loads((ROOT / "api" / "schema.json").read_text())
    jsonschema.Draft202012Validator.check_schema(doc)
    return doc


@pytest.fixture(scope="session")
def check(schema):
    def validate(instance, name):
        # The document root carries $defs; point a $ref at the wanted one.
        jsonschema.validate(instance, {**schema, "$ref": f"#/$defs/{name}"},
                            cls=jsonschema.Draft202012Validator)
        return instance
    return validate


@pytest.fixture()
def server(binary):
    proc = subprocess.Popen([binary, "serve", "--config", str(CONFIG), "--port", "0"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    m = re.match(r"listening on (http://[\d.]+:\d+)", line)
    if not m:
        proc.kill()
        raise RuntimeError(f"server did not start: {line!r} {proc.stderr.read()}")
    yield m.group(1)
    proc.terminate()
    assert proc.wait(timeout=10) == 0
