import pytest

from geovalue import synthetic as syn

_acceptance_lines = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            item.user_properties.append(("acceptance", (marker.args[0], marker.args[1])))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "acceptance" not in props:
        return
    number, title = props["acceptance"]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _acceptance_lines.append((number, f"[{status}] criterion {number}: {title}"))


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_acceptance_lines):
            terminalreporter.write_line(line)


@pytest.fixture
def tile_server():
    with syn.TileServer(size=128) as server:
        yield server


def write_project(root, template, n=120, seed=0, epochs=3, trees=5, models="extratrees,F,I,FI"):
    """Synthetic CSV, schema and config under ``root``; returns the config path."""
    root.mkdir(parents=True, exist_ok=True)
    syn.write_csv(syn.make_properties(n, seed), root / "props.csv")
    syn.write_schema(root / "schema.txt")
    (root / "pipeline.ini").write_text(f"""\
[paths]
csv = props.csv
schema = schema.txt
cache = cache
out = out

[imagery]
size = 128
concurrency = 4
template = {template}

[train]
models = {models}
epochs = {epochs}
batch_size = 64
trees = {trees}
""")
    return root / "pipeline.ini"


@pytest.fixture
def project(tmp_path, tile_server, monkeypatch):
    monkeypatch.setenv("GEOVALUE_MAPS_KEY", "test-key")
    return lambda **kw: write_project(tmp_path / "proj", tile_server.template, **kw)
