import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class StubServer:
    """Local HTTP endpoint that replays scripted (status, body) replies and records requests."""

    def __init__(self):
        self.replies = []
        self.default = (200, {})
        self.requests = []
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                with stub.lock:
                    stub.requests.append({"path": self.path, "headers": dict(self.headers),
                                          "body": json.loads(raw or b"null")})
                    status, body = stub.replies.pop(0) if stub.replies else stub.default
                if callable(body):
                    body = body(stub.requests[-1]["body"])
                data = body if isinstance(body, bytes) else json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    with StubServer() as server:
        yield server


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("LATENTLENS_API_KEY", "test-key")
    return "test-key"


def chat_reply(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


# --- acceptance summary ----------------------------------------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    number = getattr(item.function, "criterion", None)
    if number is None:
        return
    failed = report.failed
    if report.when == "call" or failed:
        prev = _criteria.get(number, (True, item.function.__doc__ or item.name))
        _criteria[number] = (prev[0] and not failed, prev[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        ok, doc = _criteria[number]
        title = doc.strip().splitlines()[0]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")


def criterion(number):
    def mark(fn):
        fn.criterion = number
        return fn
    return mark
