import base64
import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from mzs.embedder import (DEFAULT_REF_SEED, EmbeddingCache, EmbeddingError,
                          ReferenceEmbedder, RemoteBackend, cosine,
                          embed_image, embed_text, image_digest, prepare_image,
                          text_digest)

# oracle below rebuilds the documented recipe from scratch; constants are
# restated on purpose rather than imported
ORACLE_PROJ_SEED = int.from_bytes(b"C11P", "big")
FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211


def oracle_fnv1a64(data):
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) % (1 << 64)
    return h


def oracle_image_features(img):
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    feats = [img.mean(), img.std(),
             np.abs(img[:, 1:] - img[:, :-1]).mean(),
             np.abs(img[1:, :] - img[:-1, :]).mean(),
             (img > 0.5).mean()]
    bh, bw = h // 8, w // 8
    for by in range(8):
        for bx in range(8):
            feats.append(img[by * bh:(by + 1) * bh, bx * bw:(bx + 1) * bw].mean())
    feats.append(1.0)
    return np.array(feats, dtype=np.float64)


def oracle_text_features(text):
    counts = np.zeros(257, dtype=np.float64)
    token = []
    for ch in text.lower() + " ":
        if ch.isascii() and (ch.isdigit() or "a" <= ch <= "z"):
            token.append(ch)
        elif token:
            word = "".join(token)
            counts[oracle_fnv1a64(word.encode()) % 256] += 1.0
            token = []
    counts[256] = 1.0
    return counts


def oracle_embed(feats, seed, k, dim):
    rng = np.random.default_rng([ORACLE_PROJ_SEED, seed, k])
    m = rng.standard_normal((feats.size, dim)) / math.sqrt(feats.size)
    v = feats @ m
    return (v / np.linalg.norm(v)).astype(np.float32)


def test_image_embedding_matches_recipe_oracle():
    backend = ReferenceEmbedder(seed=1, dim=64, resolution=32)
    rng = np.random.default_rng(3)
    for _ in range(5):
        img = rng.random((32, 32)).astype(np.float32)
        got = embed_image(backend, img)
        want = oracle_embed(oracle_image_features(img), seed=1, k=0, dim=64)
        assert np.allclose(got, want, atol=1e-6)


def test_all_zero_image_is_projected_bias_row():
    # with every feature zero except the bias, the embedding is exactly the
    # normalized last projection row
    backend = ReferenceEmbedder(seed=1, dim=64, resolution=32)
    got = embed_image(backend, np.zeros((32, 32), dtype=np.float32))
    rng = np.random.default_rng([ORACLE_PROJ_SEED, 1, 0])
    m = rng.standard_normal((70, 64)) / math.sqrt(70.0)
    want = (m[69] / np.linalg.norm(m[69])).astype(np.float32)
    assert np.allclose(got, want, atol=1e-6)


def test_text_embedding_matches_recipe_oracle():
    backend = ReferenceEmbedder(seed=1, dim=64, resolution=32)
    for text in ("interstitial lung disease",
                 "no interstitial lung disease",
                 "Extensive fibrosing ILD with coarse reticulation.",
                 "numbers 123 mix7ed tokens"):
        got = embed_text(backend, text)
        want = oracle_embed(oracle_text_features(text), seed=1, k=1, dim=64)
        assert np.allclose(got, want, atol=1e-6)


def test_embedding_determinism_and_unit_norm():
    backend = ReferenceEmbedder(seed=0, dim=128, resolution=32)
    rng = np.random.default_rng(13)
    for _ in range(10):
        img = rng.random((32, 32)).astype(np.float32)
        a = embed_image(backend, img)
        b = embed_image(backend, img)
        assert np.array_equal(a, b)
        assert abs(float(np.linalg.norm(a.astype(np.float64))) - 1.0) <= 1e-5
    t1 = embed_text(backend, "interstitial lung disease")
    t2 = embed_text(backend, "interstitial lung disease")
    assert np.array_equal(t1, t2)


def test_negation_changes_text_embedding():
    backend = ReferenceEmbedder(seed=0, dim=128, resolution=32)
    pos = embed_text(backend, "interstitial lung disease")
    neg = embed_text(backend, "no interstitial lung disease")
    assert not np.array_equal(pos, neg)
    assert cosine(pos, neg) < 1.0 - 1e-4


def test_embed_text_rejects_empty():
    backend = ReferenceEmbedder(seed=0, dim=32, resolution=32)
    with pytest.raises(EmbeddingError):
        embed_text(backend, "")
    with pytest.raises(EmbeddingError):
        embed_text(backend, "   \n  ")


def test_embed_image_validates_input():
    backend = ReferenceEmbedder(seed=0, dim=32, resolution=32)
    with pytest.raises(EmbeddingError, match="resolution"):
        embed_image(backend, np.zeros((16, 16), dtype=np.float32))
    with pytest.raises(EmbeddingError, match="windowed"):
        embed_image(backend, np.full((32, 32), 2.0, dtype=np.float32))
    with pytest.raises(EmbeddingError, match="windowed"):
        embed_image(backend, np.full((32, 32), -0.5, dtype=np.float32))


class NoImageBackend:
    name = "text-only"
    dim = 8
    resolution = 32
    embeds_image = False
    embeds_text = True
    concurrent_safe = True

    def embed_image(self, image):
        raise AssertionError("must not be called")

    def embed_text(self, text):
        v = np.zeros(8, dtype=np.float32)
        v[0] = 1.0
        return v


class BadNormBackend(NoImageBackend):
    name = "bad-norm"
    embeds_image = True

    def embed_image(self, image):
        return np.full(8, 2.0, dtype=np.float32)


def test_capability_flags_enforced():
    with pytest.raises(EmbeddingError, match="capability"):
        embed_image(NoImageBackend(), np.zeros((32, 32), dtype=np.float32))
    assert embed_text(NoImageBackend(), "x")[0] == 1.0


def test_output_contract_enforced():
    with pytest.raises(EmbeddingError, match="norm"):
        embed_image(BadNormBackend(), np.zeros((32, 32), dtype=np.float32))


def test_reference_embedder_rejects_odd_resolution():
    with pytest.raises(ValueError):
        ReferenceEmbedder(seed=0, dim=32, resolution=30)


def test_cosine_identities_and_oracle():
    rng = np.random.default_rng(23)
    for _ in range(50):
        d = int(rng.integers(4, 256))
        v = rng.normal(size=d).astype(np.float32)
        v /= np.float32(np.linalg.norm(v))
        assert abs(cosine(v, v) - 1.0) <= 1e-6
        assert abs(cosine(v, -v) + 1.0) <= 1e-6
        w = rng.normal(size=d).astype(np.float32)
        w /= np.float32(np.linalg.norm(w))
        # extended-precision oracle via exact pairwise summation
        want = math.fsum(float(a) * float(b) for a, b in zip(v, w))
        assert abs(cosine(v, w) - want) <= 1e-6
    with pytest.raises(ValueError):
        cosine(np.zeros(3), np.zeros(4))


def test_gradient_energy_sensitivity():
    # high-frequency texture and a flat field must be clearly separable
    backend = ReferenceEmbedder(seed=DEFAULT_REF_SEED)
    res = backend.resolution
    yy, xx = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    checker = ((yy + xx) % 2).astype(np.float32)
    # flat patch shares the checkerboard mean, so only texture separates them
    flat = np.full((res, res), 0.5, dtype=np.float32)
    c = cosine(embed_image(backend, checker), embed_image(backend, flat))
    assert c <= 1.0 - 0.05


def test_prepare_image_windows_and_resizes():
    hu = np.full((40, 60), -412.0)
    out = prepare_image(hu, 32)
    assert out.shape == (32, 32)
    assert np.allclose(out, 0.5, atol=1e-6)
    # clamping applies before the resize
    out2 = prepare_image(np.full((16, 16), 5000.0), 32)
    assert np.allclose(out2, 1.0, atol=1e-6)


def test_cache_transparency_and_format(tmp_path):
    backend = ReferenceEmbedder(seed=2, dim=48, resolution=32)
    cache = EmbeddingCache(tmp_path)
    rng = np.random.default_rng(33)
    img = rng.random((32, 32)).astype(np.float32)
    direct = embed_image(backend, img)
    first = cache.image(backend, img)
    second = cache.image(backend, img)
    assert np.array_equal(first, direct)
    assert np.array_equal(second, direct)
    path = tmp_path / backend.name / f"{image_digest(img)}.emb"
    assert path.exists()
    blob = path.read_bytes()
    assert int.from_bytes(blob[:4], "little") == 48
    assert np.array_equal(np.frombuffer(blob[4:], dtype="<f4"), direct)

    text = "interstitial lung disease"
    t_direct = embed_text(backend, text)
    assert np.array_equal(cache.text(backend, text), t_direct)
    assert np.array_equal(cache.text(backend, text), t_direct)
    assert (tmp_path / backend.name / f"{text_digest(text)}.emb").exists()


def test_cache_detects_corruption(tmp_path):
    backend = ReferenceEmbedder(seed=2, dim=16, resolution=32)
    cache = EmbeddingCache(tmp_path)
    img = np.zeros((32, 32), dtype=np.float32)
    cache.image(backend, img)
    path = tmp_path / backend.name / f"{image_digest(img)}.emb"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(EmbeddingError, match="corrupt"):
        cache.get(backend.name, image_digest(img))
    assert cache.get(backend.name, "0" * 64) is None


def test_digests_distinguish_contents():
    a = np.zeros((8, 8), dtype=np.float32)
    b = np.zeros((8, 8), dtype=np.float32)
    b[0, 0] = 1e-7
    assert image_digest(a) == image_digest(a.copy())
    assert image_digest(a) != image_digest(b)
    # shape participates in the digest even when bytes match
    assert image_digest(np.zeros((4, 16), dtype=np.float32)) != image_digest(a)
    assert text_digest("abc") != text_digest("abd")


def _serve_reference(backend):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers["Content-Length"])
            req = json.loads(self.rfile.read(length))
            raw = base64.b64decode(req["payload"])
            if req["kind"] == "image":
                arr = np.frombuffer(raw, dtype="<f4").reshape(req["shape"])
                vec = backend.embed_image(arr)
            else:
                vec = backend.embed_text(raw.decode("utf-8"))
            body = json.dumps({
                "dim": int(vec.size),
                "payload": base64.b64encode(
                    np.ascontiguousarray(vec, dtype="<f4").tobytes()).decode(),
            }).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, f"http://127.0.0.1:{server.server_port}/"


def test_remote_backend_round_trip():
    local = ReferenceEmbedder(seed=4, dim=32, resolution=32)
    server, url = _serve_reference(local)
    try:
        remote = RemoteBackend(url, dim=32, resolution=32)
        rng = np.random.default_rng(43)
        img = rng.random((32, 32)).astype(np.float32)
        assert np.array_equal(embed_image(remote, img), embed_image(local, img))
        text = "coarse subpleural reticulation"
        assert np.array_equal(embed_text(remote, text), embed_text(local, text))
    finally:
        server.shutdown()


def test_remote_backend_dim_mismatch():
    local = ReferenceEmbedder(seed=4, dim=32, resolution=32)
    server, url = _serve_reference(local)
    try:
        remote = RemoteBackend(url, dim=64, resolution=32)
        with pytest.raises(EmbeddingError, match="dim"):
            embed_image(remote, np.zeros((32, 32), dtype=np.float32))
    finally:
        server.shutdown()


def test_remote_backend_unreachable():
    remote = RemoteBackend("http://127.0.0.1:9/", dim=8, resolution=32, timeout=0.5)
    with pytest.raises(EmbeddingError, match="unreachable"):
        embed_text(remote, "x")
