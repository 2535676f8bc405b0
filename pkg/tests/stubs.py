"""In-process HTTP services speaking the embedder and generator wire protocols."""

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from boxood.prompts import MockEmbedder, PromptSpec
from boxood.synthesis import GeneratorRequest, MaskSpec, decode_png, encode_png, mock_generate


class StubService:
    def __init__(self, handler_fn):
        self.requests = []
        self.fail_next = 0
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.requests.append(body)
                if outer.fail_next:
                    outer.fail_next -= 1
                    self.send_response(503)
                    self.end_headers()
                    return
                status, payload = handler_fn(body)
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}/"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def embedder_service(dim=32, bad_dim=False):
    backend = MockEmbedder(dim)

    def handle(body):
        vecs = backend.embed(body["texts"])
        if bad_dim:
            vecs = vecs[:, :-1]
        return 200, {"dim": dim, "vectors": vecs.tolist()}
    return StubService(handle)


def generator_service(generator_id="stub-sd2"):
    """Decodes the request, runs the procedural mock, re-encodes the result."""

    def handle(body):
        image = decode_png(base64.b64decode(body["image_png_b64"]))
        m = body["mask"]
        if (body["prompt"] is None) == (body["embedding"] is None):
            return 400, {"error": "exactly one of prompt/embedding"}
        prompt = (PromptSpec("generic_text", text=body["prompt"]) if body["prompt"] is not None
                  else PromptSpec("perturbed_embedding", embedding=tuple(body["embedding"]),
                                  sigma=0.0, noise_seed=0))
        h, w = image.shape[:2]
        res = mock_generate(GeneratorRequest(image, MaskSpec(w, h, m["x0"], m["y0"], m["x1"], m["y1"]),
                                             prompt, body["seed"]))
        return 200, {"image_png_b64": base64.b64encode(encode_png(res.image)).decode(),
                     "generator_id": generator_id}
    return StubService(handle)
