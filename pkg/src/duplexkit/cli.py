"""``duplexkit`` command line: every pipeline on local files, JSON results on stdout.

Exit codes: 0 success, 1 data error (malformed or out-of-range input), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .alignment import SpecialTokens, build_text_stream, load_words_jsonl, pad_fraction
from .duplex import DuplexEngine, EngineConfig, Mode, run_asr, run_tts
from .entropy import EntropyParams, artifact_report
from .errors import DuplexKitError
from .layout import (
    FRAME_RATE_HZ,
    DelayPattern,
    TokenGrid,
    apply_delay,
    grid_from_bytes,
    grid_from_jsonl,
    grid_to_bytes,
    grid_to_jsonl,
    latency_ms,
    remove_delay,
    text_delay_steps,
)

DEFAULT_SEED = 0
EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- argument types ----------------------------------------------------------

def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {path}")
    return p


def _pattern(text: str) -> DelayPattern:
    try:
        return DelayPattern.parse(text)
    except (DuplexKitError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must be in [0, 1]")
    return v


# -- file helpers ------------------------------------------------------------

def _to_jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def emit_report(results: Any, fmt: str = "json") -> bytes:
    """Serialize results; a list is wrapped as ``{"results": [...]}``. Keys are sorted."""
    payload = {"results": list(results)} if isinstance(results, (list, tuple)) else results
    if fmt == "json":
        return (json.dumps(payload, sort_keys=True, default=_to_jsonable) + "\n").encode()
    if fmt == "pretty":
        return _pretty(payload).encode()
    raise UsageError(f"unknown report format {fmt!r}")


def _pretty(payload: dict) -> str:
    if "table" in payload:
        return payload["table"]
    lines = []
    for key in sorted(payload):
        val = payload[key]
        if isinstance(val, list) and val and isinstance(val[0], dict):
            cols = sorted({c for row in val for c in row})
            rows = [[str(_to_cell(row.get(c, ""))) for c in cols] for row in val]
            widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
            lines.append(f"{key}:")
            lines.append("  " + "  ".join(c.ljust(w) for c, w in zip(cols, widths)))
            lines.extend("  " + "  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows)
        else:
            lines.append(f"{key}: {json.dumps(val, default=_to_jsonable)}")
    return "\n".join(lines) + "\n"


def _to_cell(v):
    return json.dumps(v, default=_to_jsonable) if isinstance(v, (list, dict)) else v


def read_grid(path: Path) -> TokenGrid:
    data = path.read_bytes()
    if data[:4] == b"TGRD":
        return grid_from_bytes(data)
    try:
        return grid_from_jsonl(data.decode())
    except UnicodeDecodeError as exc:
        raise DuplexKitError(f"{path}: neither a binary nor a JSONL grid") from exc


def write_grid(grid: TokenGrid, path: Path, fmt: str):
    if fmt == "binary":
        path.write_bytes(grid_to_bytes(grid))
    else:
        path.write_text(grid_to_jsonl(grid))


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DuplexKitError(f"{path}: invalid JSON ({exc})") from exc


def _read_token_lines(path: Path) -> list[list[int]]:
    """JSONL where each line is a token list or an object with a ``tokens`` list."""
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            toks = obj["tokens"] if isinstance(obj, dict) else obj
            rows.append([int(t) for t in toks])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DuplexKitError(f"{path}:{n}: expected a token list ({exc})") from exc
    return rows


def _load_model(path: Path):
    from .rqt import load_checkpoint

    return load_checkpoint(path.read_bytes())


def _special(args) -> SpecialTokens:
    return SpecialTokens(args.pad_id, args.epad_id)


# -- subcommands -------------------------------------------------------------

def cmd_latency(args):
    return {"pattern": list(args.pattern.delays), "latency_ms": latency_ms(args.pattern, args.frame_ms)}


def cmd_layout(args):
    if args.inspect:
        grid = read_grid(args.inspect)
        out = {
            "S": grid.S,
            "K": grid.K,
            "cardinalities": grid.cardinalities,
            "initial_id": grid.initial_id,
            "tokens": grid.tokens.tolist(),
        }
        if args.pattern:
            out["streams"] = remove_delay(grid, args.pattern).tolist()
        return out
    if not (args.streams and args.pattern):
        raise UsageError("layout needs --streams and --pattern (or --inspect FILE)")
    raw = _read_json(args.streams)
    streams = raw["streams"] if isinstance(raw, dict) else raw
    cards = raw.get("cardinalities") if isinstance(raw, dict) else None
    try:
        grid = apply_delay(streams, args.pattern, cards)
    except (TypeError, ValueError) as exc:
        raise DuplexKitError(f"bad streams: {exc}") from exc
    out = {"S": grid.S, "K": grid.K, "latency_ms": latency_ms(args.pattern)}
    if args.out:
        write_grid(grid, args.out, args.format)
        out["written"] = str(args.out)
    else:
        out["tokens"] = grid.tokens.tolist()
    return out


def cmd_align(args):
    sp = _special(args)
    words = load_words_jsonl(args.words.read_text().splitlines())
    stream = build_text_stream(words, args.frames, sp, args.frame_rate)
    return {
        "frames": args.frames,
        "tokens": list(stream.tokens),
        "pad_fraction": pad_fraction(stream, sp),
        "words": len(words),
    }


def cmd_rqt_train(args):
    import torch

    from .rqt import LossWeights, RQTransformer, RqtConfig, save_checkpoint, train

    torch.manual_seed(args.seed)
    grid = read_grid(args.grid)
    if grid.S < 2:
        raise DuplexKitError("training grid needs at least 2 steps")
    cfg = RqtConfig(
        cardinalities=tuple(grid.cardinalities),
        d_temporal=args.d_temporal,
        d_depth=args.d_depth,
        temporal_layers=args.temporal_layers,
        depth_layers=args.depth_layers,
        heads=args.heads,
        depthwise_params=not args.shared_depth,
        seed=args.seed,
    )
    model = RQTransformer(cfg)
    weights = LossWeights((1.0,) * (grid.K - 1), pad_id=None if args.no_text else args.pad_id)
    rng = np.random.default_rng(args.seed)
    tokens = torch.as_tensor(grid.tokens)
    window = min(args.window, grid.S)

    def batches(step):
        starts = rng.integers(0, grid.S - window + 1, size=args.batch)
        return torch.stack([tokens[s : s + window] for s in starts])

    losses = train(model, batches, args.steps, weights, lr=args.lr)
    args.out.write_bytes(save_checkpoint(model))
    return {
        "parameters": model.num_parameters(),
        "steps": args.steps,
        "initial_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
        "written": str(args.out),
    }


def cmd_rqt_sample(args):
    from .rqt import generate

    model = _load_model(args.checkpoint)
    tokens = generate(model, args.steps, args.temperature, args.seed)
    grid = TokenGrid(tokens, list(model.cardinalities))
    out = {"S": grid.S, "K": grid.K}
    if args.out:
        write_grid(grid, args.out, args.format)
        out["written"] = str(args.out)
    else:
        out["tokens"] = tokens.tolist()
    return out


def _engine_cfg(args, q_levels: int) -> EngineConfig:
    return EngineConfig(
        q_levels=q_levels,
        acoustic_delay=args.acoustic_delay,
        text_delay_steps=text_delay_steps(args.text_delay),
        temperature=args.temperature,
        text_temperature=args.text_temperature,
        seed=args.seed,
        special=_special(args),
        pad_target=getattr(args, "pad_target", 0.65),
        pad_bonus=getattr(args, "pad_bonus", 2.0),
    )


def _write_log(args, eng: DuplexEngine):
    if args.log:
        args.log.write_text(eng.log_jsonl())


def cmd_asr(args):
    model = _load_model(args.checkpoint)
    frames = _read_token_lines(args.audio)
    eng = run_asr(model, frames, _engine_cfg(args, len(model.cardinalities) - 1))
    _write_log(args, eng)
    return {
        "text_delay_steps": eng.delays[0],
        "tokens": [tok for _, tok in eng.emitted],
        "words": eng.asr_words(),
    }


def cmd_tts(args):
    model = _load_model(args.checkpoint)
    words = _read_token_lines(args.words)
    eng = run_tts(model, words, _engine_cfg(args, len(model.cardinalities) - 1), args.max_steps)
    _write_log(args, eng)
    text = eng.tts_text()
    return {
        "text": text,
        "word_times_ms": [{"word": w, "start_ms": ms} for w, ms in eng.word_times_ms()],
        "pad_fraction": pad_fraction(text, eng.sp),
        "audio": eng.grid[:, 1:].tolist(),
        "finished": eng.finished,
    }


def cmd_dialogue(args):
    model = _load_model(args.checkpoint)
    K = len(model.cardinalities)
    if K % 2 == 0:
        raise DuplexKitError(f"dialogue needs a 2Q+1-stream model, got {K} streams")
    eng = DuplexEngine(model, Mode.DIALOGUE, _engine_cfg(args, (K - 1) // 2))
    steps = [eng.step_dialogue(frame) for frame in _read_token_lines(args.user)]
    _write_log(args, eng)
    return {
        "text": [st.text for st in steps],
        "frames": [st.frame for st in steps if st.frame is not None],
    }


def cmd_entropy(args):
    grid = read_grid(args.grid)
    p = EntropyParams(
        context=args.context,
        window=args.window,
        eta_flat=args.eta_flat,
        eta_audio_silence=args.eta_silence,
        eta_gibberish=args.eta_gibberish,
        eta_noise=args.eta_noise,
    )
    report = artifact_report(grid, args.n_audio, p)
    out = report.to_dict()
    if args.pretty:
        out["table"] = report.to_table(args.grid.stem)
    return out


def _audio_id(path: Path) -> str:
    return path.stem


def cmd_fp_index(args):
    from .fingerprint import SignatureIndex, load_signatures

    ix = SignatureIndex()
    for path in args.audio:
        ix.add(_audio_id(path), load_signatures(path))
    args.out.write_bytes(ix.to_bytes())
    return {"indexed": len(ix), "postings": ix.n_postings, "written": str(args.out)}


def cmd_fp_query(args):
    from .fingerprint import SignatureIndex, load_signatures

    ix = SignatureIndex.from_bytes(args.index.read_bytes())
    matches = ix.query(load_signatures(args.audio), args.tolerance)
    return [{"rank": r + 1, "audio_id": m.audio_id, "offset": m.offset, "votes": m.votes}
            for r, m in enumerate(matches[: args.top])]


def cmd_fp_dedup(args):
    from .fingerprint import DuplicateSet, build_duplicate_set, is_duplicate, load_signatures

    corpus = [(_audio_id(p), load_signatures(p)) for p in args.audio]
    if args.dup:
        dup = DuplicateSet.from_bytes(args.dup.read_bytes())
        if args.threshold is not None:
            dup.threshold = args.threshold
    else:
        dup = build_duplicate_set(
            corpus, args.min_matches, args.threshold if args.threshold is not None else 5, workers=args.workers
        )
        if args.out:
            args.out.write_bytes(dup.to_bytes())
    results = []
    for aid, sigs in corpus:
        flag, score = is_duplicate(sigs, dup)
        results.append({"audio_id": aid, "duplicate": flag, "score": score})
    return {"fused_signatures": len(dup), "threshold": dup.threshold, "results": results}


def cmd_serve(args):
    import uvicorn

    from .service.app import create_app

    model = _load_model(args.checkpoint) if args.checkpoint else None
    uvicorn.run(create_app(model), host=args.host, port=args.port)
    return None


# -- parser ------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    p.add_argument("--pretty", action="store_true", help="human-readable output instead of JSON")


def _add_special(p):
    p.add_argument("--pad-id", type=_pos_int, default=1, help="PAD token id (default 1)")
    p.add_argument("--epad-id", type=_pos_int, default=2, help="EPAD token id (default 2)")


def _add_engine(p):
    p.add_argument("--checkpoint", type=_existing, required=True, help="model checkpoint from rqt-train")
    p.add_argument("--acoustic-delay", type=_nonneg_int, default=1, help="acoustic delay in steps (default 1)")
    p.add_argument("--text-delay", type=_nonneg_float, default=2.0, help="text/audio lag in seconds (default 2.0)")
    p.add_argument("--temperature", type=_nonneg_float, default=0.8, help="sampling temperature (default 0.8)")
    p.add_argument("--text-temperature", type=_nonneg_float, default=None,
                   help="text stream temperature (default: same as --temperature)")
    p.add_argument("--log", type=Path, help="write the per-step session log (JSONL) here")
    _add_special(p)


def _add_grid_out(p):
    p.add_argument("--out", type=Path, help="write the grid here instead of printing it")
    p.add_argument("--format", choices=("json", "binary"), default="json", help="grid file format (default json)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="duplexkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"duplexkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("latency", help="theoretical latency of a delay pattern")
    p.add_argument("--pattern", type=_pattern, required=True, help="comma-separated per-stream delays")
    p.add_argument("--frame-ms", type=_pos_int, default=80, help="frame duration in ms (default 80)")
    _add_common(p)
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("layout", help="build a delayed token grid or inspect a grid file")
    p.add_argument("--streams", type=_existing, help='JSON {"streams": [[...], ...], "cardinalities": [...]}')
    p.add_argument("--pattern", type=_pattern, help="comma-separated per-stream delays")
    p.add_argument("--inspect", type=_existing, help="print a grid file (binary or JSONL)")
    _add_grid_out(p)
    _add_common(p)
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("align", help="word timings to a frame-aligned text stream")
    p.add_argument("--words", type=_existing, required=True, help='JSONL of {"word", "tokens", "start"}')
    p.add_argument("--frames", type=_pos_int, required=True, help="number of frames T")
    p.add_argument("--frame-rate", type=float, default=FRAME_RATE_HZ, help="frames per second (default 12.5)")
    _add_special(p)
    _add_common(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("rqt-train", help="train a toy RQ-Transformer on a grid file")
    p.add_argument("--grid", type=_existing, required=True, help="training grid (binary or JSONL)")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--steps", type=_nonneg_int, default=200, help="optimizer steps (default 200)")
    p.add_argument("--batch", type=_pos_int, default=8, help="windows per batch (default 8)")
    p.add_argument("--window", type=_pos_int, default=32, help="steps per window (default 32)")
    p.add_argument("--lr", type=float, default=3e-3, help="Adam learning rate (default 3e-3)")
    p.add_argument("--d-temporal", type=_pos_int, default=64, help="temporal width (default 64)")
    p.add_argument("--d-depth", type=_pos_int, default=32, help="depth width (default 32)")
    p.add_argument("--temporal-layers", type=_pos_int, default=2, help="temporal layers (default 2)")
    p.add_argument("--depth-layers", type=_pos_int, default=2, help="depth layers (default 2)")
    p.add_argument("--heads", type=_pos_int, default=2, help="attention heads (default 2)")
    p.add_argument("--shared-depth", action="store_true", help="share depth weights across streams")
    p.add_argument("--no-text", action="store_true", help="stream 1 is not text: no PAD down-weighting")
    p.add_argument("--pad-id", type=_pos_int, default=1, help="PAD token id (default 1)")
    _add_common(p)
    p.set_defaults(func=cmd_rqt_train)

    p = sub.add_parser("rqt-sample", help="free-running generation from a checkpoint")
    p.add_argument("--checkpoint", type=_existing, required=True, help="model checkpoint")
    p.add_argument("--steps", type=_nonneg_int, default=50, help="steps to generate (default 50)")
    p.add_argument("--temperature", type=_nonneg_float, default=0.8, help="sampling temperature (default 0.8)")
    _add_grid_out(p)
    _add_common(p)
    p.set_defaults(func=cmd_rqt_sample)

    p = sub.add_parser("asr", help="streaming ASR: audio frames in, delayed text out")
    p.add_argument("--audio", type=_existing, required=True, help="JSONL of per-frame audio token lists")
    _add_engine(p)
    _add_common(p)
    p.set_defaults(func=cmd_asr)

    p = sub.add_parser("tts", help="streaming TTS: word queue in, text and audio tokens out")
    p.add_argument("--words", type=_existing, required=True, help='JSONL of word token lists or {"tokens": [...]}')
    p.add_argument("--pad-target", type=_fraction, default=0.65, help="target PAD fraction (default 0.65)")
    p.add_argument("--pad-bonus", type=_nonneg_float, default=2.0, help="PAD logit bonus (default 2.0)")
    p.add_argument("--max-steps", type=_pos_int, default=10_000, help="hard step limit (default 10000)")
    _add_engine(p)
    _add_common(p)
    p.set_defaults(func=cmd_tts)

    p = sub.add_parser("dialogue", help="full-duplex session driven by user audio frames")
    p.add_argument("--user", type=_existing, required=True, help="JSONL of per-frame user audio token lists")
    _add_engine(p)
    _add_common(p)
    p.set_defaults(func=cmd_dialogue)

    p = sub.add_parser("entropy", help="windowed entropy artifact report for a grid")
    p.add_argument("--grid", type=_existing, required=True, help="grid file: stream 1 text, then audio streams")
    p.add_argument("--n-audio", type=_pos_int, default=None, help="audio streams to use (default: all)")
    p.add_argument("--context", type=_pos_int, default=64, help="entropy context C (default 64)")
    p.add_argument("--window", type=_pos_int, default=64, help="classification window (default 64)")
    p.add_argument("--eta-flat", type=float, default=1e-3, help="flat-slope threshold (default 1e-3)")
    p.add_argument("--eta-silence", type=float, default=2.0, help="audio silence threshold (default 2)")
    p.add_argument("--eta-gibberish", type=float, default=3.5, help="text gibberish threshold (default 3.5)")
    p.add_argument("--eta-noise", type=float, default=0.6, help="audio noise spread threshold (default 0.6)")
    _add_common(p)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("fp-index", help="fingerprint WAV or .sig files into an index")
    p.add_argument("--audio", type=_existing, nargs="+", required=True, help="WAV or signature files")
    p.add_argument("--out", type=Path, required=True, help="index file path")
    _add_common(p)
    p.set_defaults(func=cmd_fp_index)

    p = sub.add_parser("fp-query", help="rank indexed audio against a query clip")
    p.add_argument("--index", type=_existing, required=True, help="index file from fp-index")
    p.add_argument("--audio", type=_existing, required=True, help="WAV or signature file")
    p.add_argument("--tolerance", type=int, choices=(0, 1), default=0, help="time-delta tolerance (default 0)")
    p.add_argument("--top", type=_pos_int, default=10, help="results to print (default 10)")
    _add_common(p)
    p.set_defaults(func=cmd_fp_query)

    p = sub.add_parser("fp-dedup", help="build a fused duplicate set and flag duplicated clips")
    p.add_argument("--audio", type=_existing, nargs="+", required=True, help="WAV or signature files")
    p.add_argument("--dup", type=_existing, help="filter against an existing duplicate set instead of building")
    p.add_argument("--out", type=Path, help="write the fused duplicate set here")
    p.add_argument("--min-matches", type=_pos_int, default=10, help="audios a segment must appear in (default 10)")
    p.add_argument("--threshold", type=_pos_int, default=None, help="match votes to flag a clip (default 5)")
    p.add_argument("--workers", type=_pos_int, default=1, help="cross-matching threads (default 1)")
    _add_common(p)
    p.set_defaults(func=cmd_fp_dedup)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1", help="bind address (default 127.0.0.1)")
    p.add_argument("--port", type=_pos_int, default=8000, help="port (default 8000)")
    p.add_argument("--checkpoint", type=_existing, help="model for inference sessions (optional)")
    _add_common(p)
    p.set_defaults(func=cmd_serve)
    return parser


def run(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        result = args.func(args)
    except UsageError as exc:
        print(str(exc), file=stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (DuplexKitError, OSError) as exc:
        print(f"duplexkit: error: {exc}", file=stderr)
        return EXIT_DATA
    if result is not None:
        stdout.write(emit_report(result, "pretty" if args.pretty else "json").decode())
        stdout.flush()
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
