import io
import json

import numpy as np
import pytest

from audio_synth import SR, tones
from duplexkit.cli import emit_report, run
from duplexkit.fingerprint import write_wav
from duplexkit.layout import TokenGrid, grid_to_jsonl


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


def ok(*argv):
    code, out, err = cli(*argv)
    assert code == 0, err
    return json.loads(out)


def write_grid_file(path, K, S=40, card=6, seed=0):
    rng = np.random.default_rng(seed)
    grid = TokenGrid(rng.integers(1, card + 1, (S, K)), [card] * K)
    path.write_text(grid_to_jsonl(grid))
    return path


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    f = {"dir": d}
    f["words"] = d / "words.jsonl"
    f["words"].write_text(
        "\n".join(json.dumps(w) for w in [
            {"word": "hello", "tokens": [10, 11], "start": 0.5},
            {"word": "world", "tokens": [12], "start": 2.0},
        ]) + "\n"
    )
    f["grid5"] = write_grid_file(d / "g5.jsonl", 5)
    f["grid4"] = write_grid_file(d / "g4.jsonl", 4)
    common = ["--steps", 2, "--d-temporal", 16, "--d-depth", 8, "--window", 8, "--batch", 2]
    for k in (4, 5):
        f[f"ckpt{k}"] = d / f"m{k}.ckpt"
        ok("rqt-train", "--grid", f[f"grid{k}"], "--out", f[f"ckpt{k}"], *common)
    f["user"] = d / "user.jsonl"
    f["user"].write_text("\n".join(json.dumps([1 + i % 6, 2]) for i in range(6)) + "\n")
    f["audio"] = d / "audio.jsonl"
    f["audio"].write_text("\n".join(json.dumps([1 + i % 6, 2, 3]) for i in range(30)) + "\n")
    f["tts_words"] = d / "tts.jsonl"
    f["tts_words"].write_text("[10, 11]\n[12]\n")
    rng = np.random.default_rng(0)
    f["wavs"] = []
    for i in range(3):
        p = d / f"clip{i}.wav"
        write_wav(p, 0.5 * tones(rng, 8.0), SR)
        f["wavs"].append(p)
    f["garbage"] = d / "garbage.bin"
    f["garbage"].write_bytes(bytes(range(256)))
    f["badjson"] = d / "bad.jsonl"
    f["badjson"].write_text("{not json\n")
    f["short"] = write_grid_file(d / "short.jsonl", 4, S=50)
    return f


def test_latency_example():
    assert ok("latency", "--pattern", "0,2,2,2,2,2,2,2")["latency_ms"] == 240


def test_align_emits_requested_length(files):
    r = ok("align", "--words", files["words"], "--frames", 100)
    assert len(r["tokens"]) == 100 and r["words"] == 2


def test_fp_query_self_rank_one(files):
    idx = files["dir"] / "idx.bin"
    assert ok("fp-index", "--audio", *files["wavs"], "--out", idx)["indexed"] == 3
    res = ok("fp-query", "--index", idx, "--audio", files["wavs"][1])["results"]
    assert res[0]["rank"] == 1 and res[0]["audio_id"] == "clip1" and res[0]["offset"] == 0


def test_fp_dedup_runs(files):
    r = ok("fp-dedup", "--audio", *files["wavs"], "--min-matches", 2)
    assert r["fused_signatures"] == 0 and not any(x["duplicate"] for x in r["results"])


def test_binary_grid_reloadable(files):
    d = files["dir"]
    streams = {"streams": [[1, 2, 3, 4], [5, 6, 7, 8], [2, 2, 2, 2]], "cardinalities": [8, 8, 8]}
    (d / "s.json").write_text(json.dumps(streams))
    ok("layout", "--streams", d / "s.json", "--pattern", "0,1,2", "--out", d / "g.bin", "--format", "binary")
    back = ok("layout", "--inspect", d / "g.bin", "--pattern", "0,1,2")
    assert back["S"] == 6 and back["streams"] == streams["streams"]


def test_emit_report_contract():
    assert emit_report([]).decode().strip() == '{"results": []}'
    data = {"b": [1, 2], "a": {"z": 1, "y": np.int64(2)}}
    first = emit_report(data)
    assert first == emit_report(dict(reversed(list(data.items()))))
    assert json.loads(first) == {"a": {"y": 2, "z": 1}, "b": [1, 2]}


def test_pretty_output(files):
    code, out, _ = cli("fp-query", "--index", files["dir"] / "idx.bin", "--audio", files["wavs"][0], "--pretty")
    assert code == 0 and "audio_id" in out.splitlines()[1]


def test_help_and_version():
    assert cli("--help")[0] == 0
    assert cli("align", "--help")[0] == 0
    assert cli("--version")[0] == 0


def test_seeded_runs_are_deterministic(files):
    args = ["rqt-sample", "--checkpoint", files["ckpt5"], "--steps", 8, "--temperature", 1.0]
    a, b = cli(*args, "--seed", 3), cli(*args, "--seed", 3)
    assert a == b and a[0] == 0
    tts = ["tts", "--checkpoint", files["ckpt4"], "--words", files["tts_words"], "--max-steps", 40, "--seed", 1]
    assert cli(*tts) == cli(*tts)
    d = ["dialogue", "--checkpoint", files["ckpt5"], "--user", files["user"], "--seed", 2]
    assert cli(*d) == cli(*d) and cli(*d)[0] == 0
    train = ["rqt-train", "--grid", files["grid4"], "--steps", 2, "--d-temporal", 16, "--d-depth", 8, "--seed", 5]
    a = cli(*train, "--out", files["dir"] / "t1.ckpt")
    b = cli(*train, "--out", files["dir"] / "t2.ckpt")
    assert (files["dir"] / "t1.ckpt").read_bytes() == (files["dir"] / "t2.ckpt").read_bytes()
    assert json.loads(a[1])["final_loss"] == json.loads(b[1])["final_loss"]


def test_asr_and_entropy(files):
    r = ok("asr", "--checkpoint", files["ckpt4"], "--audio", files["audio"], "--text-delay", 0.8)
    # 30 frames plus a 10-step flush of the text lag: one token per frame of audio
    assert r["text_delay_steps"] == 10 and len(r["tokens"]) == 30
    e = ok("entropy", "--grid", files["grid4"], "--context", 8, "--window", 8)
    assert sum(e["percentages"].values()) == pytest.approx(100.0)


MISUSE = [
    # usage errors
    ((), 2),
    (("transcribe",), 2),
    (("latency",), 2),
    (("latency", "--pattern", "a,b"), 2),
    (("latency", "--pattern", "0,-1"), 2),
    (("latency", "--pattern", "0,1", "--bogus"), 2),
    (("align", "--words", "{words}", "--frames", "0"), 2),
    (("align", "--words", "/nonexistent.jsonl", "--frames", "10"), 2),
    (("layout",), 2),
    (("fp-query", "--index", "{garbage}", "--audio", "{wav}", "--tolerance", "2"), 2),
    (("rqt-train", "--grid", "{grid4}", "--out", "{tmp}", "--batch", "0"), 2),
    (("tts", "--checkpoint", "{ckpt4}", "--words", "{tts}", "--pad-target", "1.5"), 2),
    (("asr", "--audio", "{audio}"), 2),
    # data errors
    (("align", "--words", "{badjson}", "--frames", "10"), 1),
    (("layout", "--inspect", "{garbage}"), 1),
    (("fp-query", "--index", "{garbage}", "--audio", "{wav}"), 1),
    (("fp-index", "--audio", "{garbage}", "--out", "{tmp}"), 1),
    (("rqt-sample", "--checkpoint", "{garbage}"), 1),
    (("dialogue", "--checkpoint", "{ckpt4}", "--user", "{user}"), 1),
    (("entropy", "--grid", "{short}"), 1),
]


@pytest.mark.parametrize("argv,code", MISUSE, ids=[f"case{i:02d}" for i in range(len(MISUSE))])
def test_scripted_misuse(files, argv, code):
    subs = {
        "words": files["words"], "garbage": files["garbage"], "wav": files["wavs"][0],
        "grid4": files["grid4"], "tmp": files["dir"] / "out.tmp", "ckpt4": files["ckpt4"],
        "tts": files["tts_words"], "audio": files["audio"], "badjson": files["badjson"],
        "user": files["user"], "short": files["short"],
    }
    got, out, err = cli(*(a.format(**subs) for a in argv))
    assert got == code, err
    assert out == "" and err


def test_twenty_misuse_cases():
    assert len(MISUSE) == 20
