import base64
import io
import json
import random
import threading
import time

import httpx
import pytest
from PIL import Image

from visreason.backends import (
    Backend,
    Capabilities,
    Message,
    ModelRequest,
    ModelResponse,
    OllamaBackend,
    OpenAICompatBackend,
    RetryPolicy,
    ScriptedBackend,
    encode_image,
    fingerprint,
    make_backend,
    user_request,
)
from visreason.backends.base import EmbeddingVector
from visreason.domain import ImageRef
from visreason.errors import (
    AuthError,
    BackendError,
    DecodeError,
    InputError,
    OversizePayloadError,
    RateLimitError,
    ReplayMiss,
    TransportError,
)
from visreason.synthetic import memory_image


def _png(w, h, fmt="PNG"):
    buf = io.BytesIO()
    Image.new("RGB", (w, h), (10, 200, 30)).save(buf, format=fmt)
    return ImageRef.from_bytes(buf.getvalue(), id=f"{w}x{h}")


# --------------------------------------------------------------------------
# requests and fingerprints


def test_images_only_on_user_messages():
    with pytest.raises(ValueError):
        ModelRequest("m", (Message("system", "x", (memory_image("a"),)),))


def test_fingerprint_depends_on_content_not_tag():
    a = user_request("m", "hello", [memory_image("a")], tag="x")
    b = user_request("m", "hello", [memory_image("a")], tag="y")
    assert fingerprint(a) == fingerprint(b)
    assert fingerprint(a) != fingerprint(user_request("m", "hello", [memory_image("b")]))
    assert fingerprint(a) != fingerprint(user_request("m2", "hello", [memory_image("a")]))
    assert fingerprint(a) != fingerprint(user_request("m", "hello!", [memory_image("a")]))
    # order of images matters
    ab = user_request("m", "t", [memory_image("a"), memory_image("b")])
    ba = user_request("m", "t", [memory_image("b"), memory_image("a")])
    assert fingerprint(ab) != fingerprint(ba)


# --------------------------------------------------------------------------
# retry, capability, concurrency


class Flaky(Backend):
    def __init__(self, failures, exc=TransportError, **kw):
        super().__init__("flaky", **kw)
        self.failures = failures
        self.exc = exc
        self.attempts = 0

    def _complete(self, request):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise self.exc("boom")
        return ModelResponse("ok")


def _policy(slept):
    return RetryPolicy(sleep=slept.append, rng=random.Random(0))


def test_retry_recovers_with_backoff():
    slept = []
    b = Flaky(2, retry=_policy(slept))
    assert b.complete(user_request("m", "x")).text == "ok"
    assert b.attempts == 3
    assert 0.75 <= slept[0] <= 1.25 and 3.0 <= slept[1] <= 5.0


def test_retry_gives_up_after_three():
    slept = []
    b = Flaky(10, retry=_policy(slept))
    with pytest.raises(TransportError):
        b.complete(user_request("m", "x"))
    assert b.attempts == 4 and len(slept) == 3
    assert 12.0 <= slept[2] <= 20.0


@pytest.mark.parametrize("exc", [AuthError, OversizePayloadError, BackendError])
def test_no_retry_on_permanent_errors(exc):
    slept = []
    b = Flaky(1, exc=exc, retry=_policy(slept))
    with pytest.raises(exc):
        b.complete(user_request("m", "x"))
    assert b.attempts == 1 and not slept


def test_rate_limit_honours_retry_after():
    slept = []

    class Limited(Flaky):
        def _complete(self, request):
            self.attempts += 1
            if self.attempts == 1:
                raise RateLimitError("slow down", retry_after=30)
            return ModelResponse("ok")

    b = Limited(0, retry=_policy(slept))
    b.complete(user_request("m", "x"))
    assert slept == [30]


def test_capability_limit_rejects_before_sending():
    b = Flaky(0, capabilities=Capabilities(max_images=1))
    with pytest.raises(OversizePayloadError):
        b.complete(user_request("m", "x", [memory_image("a"), memory_image("b")]))
    assert b.attempts == 0
    blind = Flaky(0, capabilities=Capabilities(vision=False))
    with pytest.raises(OversizePayloadError):
        blind.complete(user_request("m", "x", [memory_image("a")]))


def test_in_flight_bound():
    peak = 0
    active = 0
    lock = threading.Lock()

    class Slow(Backend):
        def _complete(self, request):
            nonlocal peak, active
            with lock:
                active += 1
                peak = max(peak, active)
            time.sleep(0.02)
            with lock:
                active -= 1
            return ModelResponse("ok")

    b = Slow("slow", max_in_flight=3)
    threads = [threading.Thread(target=b.complete, args=(user_request("m", str(i)),)) for i in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert 1 <= peak <= 3


def test_embed_contract():
    b = ScriptedBackend(embed_fallback=lambda t: [len(t), 1.0])
    vecs = b.embed(["a", "bbb"])
    assert [v.values for v in vecs] == [(1.0, 1.0), (3.0, 1.0)]
    with pytest.raises(InputError):
        b.embed([])

    class Ragged(Backend):
        def _embed(self, texts):
            return [EmbeddingVector((1.0,) * (i + 1), "r") for i in range(len(texts))]

    with pytest.raises(BackendError):
        Ragged("r").embed(["a", "b"])


# --------------------------------------------------------------------------
# scripted backend


def test_scripted_replay_and_miss(tmp_path):
    b = ScriptedBackend()
    req = user_request("m", "describe", [memory_image("a")], tag="ca_describe")
    fp = b.register_request(req, "a reply")
    assert b.complete(req).text == "a reply"
    assert b.calls == [("ca_describe", fp)]
    near = user_request("m", "describe!", [memory_image("a")], tag="ca_describe")
    with pytest.raises(ReplayMiss) as ei:
        b.complete(near)
    assert ei.value.nearest == fp

    b.save(tmp_path / "f.jsonl")
    c = ScriptedBackend()
    assert c.load(tmp_path / "f.jsonl") == 1
    assert c.complete(req).text == "a reply"


def test_scripted_miss_is_not_retried():
    slept = []
    b = ScriptedBackend()
    b.retry = _policy(slept)
    with pytest.raises(ReplayMiss):
        b.complete(user_request("m", "x"))
    assert not slept


# --------------------------------------------------------------------------
# image encoding


def test_encode_passthrough_and_downscale():
    small = _png(100, 50)
    enc = encode_image(small, 1024)
    assert base64.b64decode(enc.data) == small.data
    assert (enc.width, enc.height, enc.media_type) == (100, 50, "image/png")
    assert enc.data_url.startswith("data:image/png;base64,")

    big = _png(2048, 1000, "JPEG")
    enc = encode_image(big, 1024)
    assert (enc.width, enc.height) == (1024, 500)
    assert enc.media_type == "image/jpeg"
    assert Image.open(io.BytesIO(base64.b64decode(enc.data))).size == (1024, 500)
    assert encode_image(big, None).width == 2048


def test_encode_rejects_garbage():
    with pytest.raises(DecodeError):
        encode_image(ImageRef.from_bytes(b"not an image"))


# --------------------------------------------------------------------------
# HTTP adapters against a mock transport


def _client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_openai_payload_and_reply(monkeypatch):
    monkeypatch.setenv("OPENAI_API_KEY", "sk-test")
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(
            200,
            json={
                "choices": [{"message": {"content": "**Conclusion**: cat_2"}, "finish_reason": "stop"}],
                "usage": {"prompt_tokens": 10, "completion_tokens": 3},
            },
        )

    b = OpenAICompatBackend(base_url="https://example.test/v1", client=_client(handler))
    img = _png(20, 10)
    resp = b.complete(user_request("gpt-4o", "Look", [img, img]))
    assert resp.text == "**Conclusion**: cat_2"
    assert resp.token_usage == {"prompt_tokens": 10, "completion_tokens": 3}
    assert seen["url"] == "https://example.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    body = seen["body"]
    assert body["model"] == "gpt-4o" and body["temperature"] == 0.0 and body["max_tokens"] == 2048
    parts = body["messages"][0]["content"]
    assert parts[0] == {"type": "text", "text": "Look"}
    assert [p["type"] for p in parts[1:]] == ["image_url", "image_url"]
    assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")


def test_openai_text_only_message_is_plain_string(monkeypatch):
    monkeypatch.setenv("OPENAI_API_KEY", "k")
    b = OpenAICompatBackend(base_url="https://x.test", client=_client(lambda r: httpx.Response(500)))
    assert b.build_payload(user_request("m", "hi"))["messages"] == [{"role": "user", "content": "hi"}]


def test_missing_key_fails_without_network(monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    calls = []
    b = OpenAICompatBackend(client=_client(lambda r: calls.append(r) or httpx.Response(200, json={})))
    with pytest.raises(AuthError):
        b.complete(user_request("m", "x"))
    assert calls == []


@pytest.mark.parametrize(
    "status, exc",
    [(401, AuthError), (403, AuthError), (413, OversizePayloadError), (400, BackendError)],
)
def test_status_mapping(monkeypatch, status, exc):
    monkeypatch.setenv("OPENAI_API_KEY", "k")
    b = OpenAICompatBackend(base_url="https://x.test", client=_client(lambda r: httpx.Response(status, text="no")))
    with pytest.raises(exc):
        b.complete(user_request("m", "x"))


def test_server_errors_are_retried(monkeypatch):
    monkeypatch.setenv("OPENAI_API_KEY", "k")
    responses = iter(
        [
            httpx.Response(503),
            httpx.Response(429, headers={"retry-after": "2"}),
            httpx.Response(200, json={"choices": [{"message": {"content": "fine"}}]}),
        ]
    )
    slept = []
    b = OpenAICompatBackend(
        base_url="https://x.test", client=_client(lambda r: next(responses)), retry=_policy(slept)
    )
    assert b.complete(user_request("m", "x")).text == "fine"
    assert len(slept) == 2 and slept[1] >= 2


def test_transport_failure_maps_to_transport_error(monkeypatch):
    monkeypatch.setenv("OPENAI_API_KEY", "k")

    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    b = OpenAICompatBackend(base_url="https://x.test", client=_client(handler), retry=RetryPolicy(delays=()))
    with pytest.raises(TransportError):
        b.complete(user_request("m", "x"))


def test_openai_embeddings(monkeypatch):
    monkeypatch.setenv("OPENAI_API_KEY", "k")

    def handler(request):
        body = json.loads(request.content)
        assert body["model"] == "text-embedding-3-large"
        data = [{"index": i, "embedding": [float(i), 1.0]} for i in range(len(body["input"]))]
        return httpx.Response(200, json={"data": list(reversed(data))})

    b = OpenAICompatBackend(base_url="https://x.test", client=_client(handler))
    assert [v.values for v in b.embed(["a", "b"])] == [(0.0, 1.0), (1.0, 1.0)]


def test_ollama_payload_and_downscale():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"message": {"content": "cat_1"}, "eval_count": 4, "prompt_eval_count": 9})

    b = OllamaBackend(base_url="localhost:11434", client=_client(handler))
    assert b.capabilities.max_images == 1
    resp = b.complete(user_request("llava:7b", "Describe", [_png(3000, 1500)]))
    assert resp.text == "cat_1"
    assert resp.token_usage == {"prompt_tokens": 9, "completion_tokens": 4}
    assert seen["url"] == "http://localhost:11434/api/chat"
    body = seen["body"]
    assert body["stream"] is False and body["options"] == {"temperature": 0.0, "num_predict": 2048}
    img = Image.open(io.BytesIO(base64.b64decode(body["messages"][0]["images"][0])))
    assert img.size == (1024, 512)
    with pytest.raises(OversizePayloadError):
        b.complete(user_request("llava:7b", "x", [_png(5, 5), _png(6, 6)]))


def test_make_backend(tmp_path, monkeypatch):
    monkeypatch.setenv("OPENAI_API_KEY", "k")
    b, model = make_backend("openai:gpt-4o")
    assert isinstance(b, OpenAICompatBackend) and model == "gpt-4o"
    b, model = make_backend("gemini:gemini-2.0-flash")
    assert b.backend_id == "gemini" and "generativelanguage" in b.base_url
    b, model = make_backend("ollama:llava:7b")
    assert model == "llava:7b" and b.capabilities.max_images == 1
    fixture = tmp_path / "replies.jsonl"
    fixture.write_text("")
    b, model = make_backend(f"scripted:{fixture}#gpt-4o", max_images=1)
    assert model == "gpt-4o" and b.capabilities.max_images == 1
    assert make_backend(f"scripted:{fixture}")[1] == "replies"
    with pytest.raises(ValueError):
        make_backend("nonsense")
    with pytest.raises(ValueError):
        make_backend("acme:model")
