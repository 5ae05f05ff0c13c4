from __future__ import annotations

import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from diagen.core import DatasetManifest, FeatureTable, RealImageRecord  # noqa: E402
from diagen.embeddings import ClassEmbedding  # noqa: E402

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        props = dict(report.user_properties)
        detail = "; ".join(str(props[k]) for k in ("criterion", "measured") if k in props)
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (verdict, detail) in sorted(_ACCEPTANCE.items()):
        terminalreporter.write_line(f"{verdict}  {name}  {detail}".rstrip())


@pytest.fixture
def two_class_setup():
    """2 classes x 2 reals with 4-D features and 16-D embeddings."""
    rng = np.random.default_rng(11)
    classes = ("cat", "dog")
    reals, ids, labels, rows = [], [], [], []
    for ci, c in enumerate(classes):
        for i in range(2):
            rid = f"{c}_{i}"
            reals.append(RealImageRecord(rid, c, f"images/{rid}.png"))
            ids.append(rid)
            labels.append(c)
            rows.append(rng.normal(5.0 * ci, 1.0, 4))
    manifest = DatasetManifest(classes, reals)
    table = FeatureTable(ids, labels, np.array(rows))
    embeddings = {c: ClassEmbedding(c, f"<cls_{c}>", rng.normal(0, 0.3, 16)) for c in classes}
    return manifest, table, embeddings


class _Recorder:
    def __init__(self):
        self.requests: list[tuple[str, dict]] = []
        self.responder = None


@pytest.fixture
def http_service():
    """A local JSON-over-HTTP service; set ``.responder(path, body) -> (status, payload)``."""
    rec = _Recorder()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
            rec.requests.append((self.path, body))
            status, payload = rec.responder(self.path, body)
            data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    rec.url = f"http://127.0.0.1:{server.server_address[1]}"
    yield rec
    server.shutdown()
    server.server_close()
