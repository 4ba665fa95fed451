import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def tiny_world(tmp_path, n_images=64, n_train=20, n_val=6, n_test=6, dim=8, seed=0, tau=0.0, **config):
    """Write a small synthetic world and return (world, config path)."""
    from prefdistill.synth import make_world, write_world

    world = make_world(n_images, n_train, n_val, n_test, dim, seed=seed)
    base = {
        "sampler": {"groups_per_step": 20},
        "optimizer": {"lr0": 0.3, "weight_decay": 0.3, "micro_batch": 2},
        "max_steps": 4,
        "figures": False,
        "seed": seed,
    }
    for key, value in config.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return world, write_world(world, tmp_path, tau=tau, extra_config=base)


class Stub:
    """Programmable local endpoint.  ``reply(payload)`` returns (status, body)."""

    def __init__(self, reply, delay=0.0):
        self.reply = reply
        self.delay = delay
        self.requests = []
        self.in_flight = 0
        self.peak = 0
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub.lock:
                    stub.requests.append((body, dict(self.headers)))
                    stub.in_flight += 1
                    stub.peak = max(stub.peak, stub.in_flight)
                time.sleep(stub.delay)
                status, out = stub.reply(body)
                with stub.lock:
                    stub.in_flight -= 1
                data = out.encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/rank"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
