import json
import logging
import threading
import time

import httpx
import pytest

from fakg.clients import (
    ChatCaptioner,
    ChatCompletionClient,
    ChatFuser,
    ChatJudge,
    ChatSkeletonGenerator,
    ChatVerifier,
    EndpointConfig,
    HttpVerifier,
)
from fakg.graph import ego_subgraph, reference_graph
from fakg.grounding import Candidate, GroundingMode, VerifierError, ground
from fakg.synthesis import Caption, ClientError, GeneratorClients, PipelineConfig, Skeleton, run_pipeline, ManifestEntry

REF = reference_graph()
CANDS = [Candidate.from_relation(REF, r) for r in REF.relations[:3]]


def cfg(**kw):
    base = dict(endpoint="http://svc", api_key="sk-secret", model="m", backoff=0.0, retries=1)
    base.update(kw)
    return EndpointConfig(**base)


def transport(handler):
    return httpx.MockTransport(handler)


# -- configuration --------------------------------------------------------------------


def test_from_env_and_override():
    env = {"VERIFIER_ENDPOINT": "http://e", "VERIFIER_MODEL": "m1", "VERIFIER_TIMEOUT_MS": "1500"}
    c = EndpointConfig.from_env("VERIFIER", env)
    assert (c.endpoint, c.model, c.timeout) == ("http://e", "m1", 1.5)
    assert EndpointConfig.from_env("VERIFIER", env, model="m2").model == "m2"
    with pytest.raises(ValueError):
        EndpointConfig.from_env("VERIFIER", {})


def test_repr_hides_key():
    assert "sk-secret" not in repr(cfg())


# -- /verify --------------------------------------------------------------------------


def test_http_verifier_round_trip():
    seen = {}

    def handler(req):
        seen["url"] = str(req.url)
        seen["auth"] = req.headers.get("authorization")
        body = json.loads(req.content)
        seen["body"] = body
        return httpx.Response(200, json={"matches": [i == 1 for i in range(len(body["candidates"]))]})

    v = HttpVerifier(cfg(), transport(handler))
    assert v.verify("think text", CANDS) == [False, True, False]
    assert seen["url"] == "http://svc/verify"
    assert seen["auth"] == "Bearer sk-secret"
    assert seen["body"]["think"] == "think text"
    assert seen["body"]["candidates"][0] == CANDS[0].to_dict()


@pytest.mark.parametrize(
    "response",
    [
        httpx.Response(500, text="boom"),
        httpx.Response(200, json={"matches": [True]}),
        httpx.Response(200, json={"nope": []}),
        httpx.Response(200, json={"matches": [1, 0, 1]}),
    ],
)
def test_http_verifier_failures(response):
    v = HttpVerifier(cfg(), transport(lambda req: response))
    with pytest.raises(VerifierError) as ei:
        v.verify("t", CANDS)
    assert ei.value.candidates == CANDS


def test_retry_on_server_error():
    calls = []

    def handler(req):
        calls.append(1)
        if len(calls) == 1:
            return httpx.Response(503)
        return httpx.Response(200, json={"matches": [True, True, True]})

    assert HttpVerifier(cfg(), transport(handler)).verify("t", CANDS) == [True] * 3
    assert len(calls) == 2


def test_no_retry_on_client_error():
    calls = []

    def handler(req):
        calls.append(1)
        return httpx.Response(401)

    with pytest.raises(VerifierError):
        HttpVerifier(cfg(retries=3), transport(handler)).verify("t", CANDS)
    assert len(calls) == 1


def test_transport_exception_becomes_verifier_error():
    def handler(req):
        raise httpx.ConnectError("refused")

    with pytest.raises(VerifierError):
        HttpVerifier(cfg(), transport(handler)).verify("t", CANDS)


def test_max_in_flight_cap():
    active, peak = [0], [0]
    lock = threading.Lock()

    def handler(req):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        return httpx.Response(200, json={"matches": [False] * 3})

    v = HttpVerifier(cfg(max_in_flight=2), transport(handler))
    threads = [threading.Thread(target=v.verify, args=("t", CANDS)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2


def test_key_never_logged(caplog):
    caplog.set_level(logging.DEBUG)
    v = HttpVerifier(cfg(), transport(lambda req: httpx.Response(503)))
    with pytest.raises(VerifierError) as ei:
        v.verify("t", CANDS)
    assert "sk-secret" not in caplog.text
    assert "sk-secret" not in str(ei.value)


def test_grounding_with_http_verifier():
    def handler(req):
        body = json.loads(req.content)
        return httpx.Response(200, json={"matches": [c["feature"] == "paper_edge" for c in body["candidates"]]})

    rep = ground("halftone dots", REF, HttpVerifier(cfg(), transport(handler)), GroundingMode.FALLBACK_VERIFIER)
    assert {r.key for r in rep.relations} == {("print", "exhibits", "lattice_pattern"), ("print", "reveals", "paper_edge")}


# -- chat adapter ---------------------------------------------------------------------


def chat_reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def test_chat_verifier():
    seen = {}

    def handler(req):
        seen["url"] = str(req.url)
        seen["body"] = json.loads(req.content)
        return chat_reply("1. yes\n2) No\n3: YES")

    v = ChatVerifier(ChatCompletionClient(cfg(), transport(handler)))
    assert v.verify("rationale", CANDS) == [True, False, True]
    assert seen["url"] == "http://svc/chat/completions"
    msgs = seen["body"]["messages"]
    assert [m["role"] for m in msgs] == ["system", "user"]
    assert msgs[1]["content"].count("?") == 3
    assert seen["body"]["model"] == "m"


def test_chat_verifier_incomplete_reply():
    v = ChatVerifier(ChatCompletionClient(cfg(), transport(lambda req: chat_reply("1. yes"))))
    with pytest.raises(VerifierError):
        v.verify("r", CANDS)


def test_chat_verifier_empty_batch_makes_no_call():
    def handler(req):
        raise AssertionError("no request expected")

    assert ChatVerifier(ChatCompletionClient(cfg(), transport(handler))).verify("r", []) == []


def test_chat_client_needs_model():
    with pytest.raises(ValueError):
        ChatCompletionClient(cfg(model=None))


def test_malformed_chat_body():
    c = ChatCompletionClient(cfg(), transport(lambda req: httpx.Response(200, json={"x": 1})))
    with pytest.raises(ConnectionError):
        c.complete([{"role": "user", "content": "hi"}])


# -- chat generators ------------------------------------------------------------------


def _gen_handler(req):
    body = json.loads(req.content)
    text = json.dumps(body["messages"])
    if "Center attack" in text:
        return chat_reply(
            'Sure: {"question": "Why is this a print attack?", "reasoning_steps": ["lattice"],'
            ' "cited_triples": [["Print", "exhibits", "lattice patterns"]]}'
        )
    if "Describe the visible evidence" in text:
        return chat_reply('{"caption": "halftone dots over the cheek"}')
    if "Combine the reasoning skeleton" in text:
        return chat_reply('{"question": "Why print?", "rationale": "halftone dots", "answer": "Print"}')
    if "fact_conflict" in text or "contradicts" in text:
        return chat_reply('{"conflict": false, "reason": ""}')
    return chat_reply('{"complexity": 0.8, "info": 0.7}')


def test_chat_generator_clients_drive_pipeline(tmp_path):
    img = tmp_path / "x.png"
    img.write_bytes(b"\x89PNG fake")
    chat = ChatCompletionClient(cfg(), transport(_gen_handler))
    clients = GeneratorClients(ChatSkeletonGenerator(chat, REF), ChatCaptioner(chat, True), ChatFuser(chat, True), ChatJudge(chat))
    res = run_pipeline([ManifestEntry("s", str(img), "Print")], REF, PipelineConfig(k=1), clients)
    assert res.stats.passed == 1
    rec = res.corpus[0]
    assert (rec.question, rec.answer, rec.rationale) == ("Why print?", "Print", "halftone dots")


def test_inline_image_is_base64(tmp_path):
    img = tmp_path / "x.png"
    img.write_bytes(b"abc")
    seen = {}

    def handler(req):
        seen["body"] = json.loads(req.content)
        return chat_reply('{"caption": "c"}')

    chat = ChatCompletionClient(cfg(), transport(handler))
    ChatCaptioner(chat, inline_images=True).caption(str(img), "Print")
    url = seen["body"]["messages"][0]["content"][0]["image_url"]["url"]
    assert url == "data:image/png;base64,YWJj"
    ChatCaptioner(chat, inline_images=False).caption("s3://bucket/x.png", "Print")
    assert seen["body"]["messages"][0]["content"][0]["image_url"]["url"] == "s3://bucket/x.png"


@pytest.mark.parametrize("reply", ["no json here", '{"caption": ""}', "{broken"])
def test_generator_bad_replies_raise_client_error(reply):
    chat = ChatCompletionClient(cfg(), transport(lambda req: chat_reply(reply)))
    with pytest.raises(ClientError):
        ChatCaptioner(chat).caption("x", "Print")


def test_judge_and_skeleton_validation():
    chat = ChatCompletionClient(cfg(), transport(lambda req: chat_reply('{"conflict": "maybe"}')))
    with pytest.raises(ClientError):
        ChatJudge(chat).judge({"caption": "c", "skeleton": Skeleton("Q?")}, "fact_conflict")
    with pytest.raises(ValueError):
        ChatJudge(chat).judge({}, "style")
    chat = ChatCompletionClient(cfg(), transport(lambda req: chat_reply('{"question": "q", "cited_triples": [["a"]]}')))
    with pytest.raises(ClientError):
        ChatSkeletonGenerator(chat, REF).generate(ego_subgraph(REF, "print", 1))


def test_transport_failure_becomes_client_error():
    chat = ChatCompletionClient(cfg(), transport(lambda req: httpx.Response(502)))
    with pytest.raises(ClientError):
        ChatFuser(chat).fuse("x", Skeleton("Q?"), Caption("c"))
