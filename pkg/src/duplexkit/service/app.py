"""FastAPI application: stateless pipelines plus stateful fingerprint index and inference sessions."""

from __future__ import annotations

import threading
import uuid
from collections import deque

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from ..alignment import SpecialTokens, WordTiming, build_text_stream, pad_fraction
from ..duplex import DuplexEngine, EngineConfig, Mode
from ..entropy import EntropyParams, artifact_report
from ..errors import InputError, NumericError, StateError
from ..fingerprint import SignatureIndex, fingerprint, pack_signatures
from ..layout import latency_ms, text_delay_steps
from . import schemas


class _Session:
    def __init__(self, engine: DuplexEngine):
        self.engine = engine
        self.queue: deque = deque()
        self.lock = threading.Lock()


def _signatures(body: schemas.AudioIn):
    if body.samples is not None:
        return pack_signatures(fingerprint(np.asarray(body.samples), body.sample_rate))
    return np.asarray(body.keys, dtype=np.uint32), np.asarray(body.anchors, dtype=np.int64)


def create_app(model=None) -> FastAPI:
    """``model`` drives inference sessions; without one the session routes answer 409."""
    app = FastAPI(title="duplexkit", version="0.1.0")
    app.state.model = model
    app.state.index = SignatureIndex()
    app.state.sessions: dict[str, _Session] = {}
    sessions_lock = threading.Lock()

    @app.exception_handler(InputError)
    async def _input_error(request: Request, exc: InputError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(NumericError)
    async def _numeric_error(request: Request, exc: NumericError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(StateError)
    async def _state_error(request: Request, exc: StateError):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "model": app.state.model is not None}

    @app.post("/latency", response_model=schemas.LatencyResponse)
    def latency(body: schemas.LatencyRequest):
        if min(body.pattern) < 0:
            raise InputError("delays must be >= 0")
        return schemas.LatencyResponse(pattern=body.pattern, latency_ms=latency_ms(body.pattern, body.frame_ms))

    @app.post("/align", response_model=schemas.AlignResponse)
    def align(body: schemas.AlignRequest):
        sp = SpecialTokens(body.pad_id, body.epad_id)
        words = [WordTiming(tuple(w.tokens), w.start, w.word) for w in body.words]
        stream = build_text_stream(words, body.frames, sp, body.frame_rate_hz)
        return schemas.AlignResponse(tokens=list(stream.tokens), pad_fraction=pad_fraction(stream, sp))

    @app.post("/entropy", response_model=schemas.EntropyResponse)
    def entropy(body: schemas.EntropyRequest):
        lengths = {len(r) for r in body.grid}
        if len(lengths) > 1:
            raise InputError("grid rows must have equal length")
        p = EntropyParams(
            body.context, body.window, body.eta_flat, body.eta_audio_silence, body.eta_gibberish, body.eta_noise
        )
        return artifact_report(np.asarray(body.grid, dtype=np.int64), body.n_audio, p).to_dict()

    @app.post("/fingerprint/index", response_model=schemas.IndexResponse)
    def fp_index(body: schemas.IndexRequest):
        sigs = _signatures(body)
        app.state.index.add(body.audio_id, sigs)
        return schemas.IndexResponse(audio_id=body.audio_id, signatures=len(sigs[0]), indexed=len(app.state.index))

    @app.post("/fingerprint/query", response_model=schemas.QueryResponse)
    def fp_query(body: schemas.QueryRequest):
        matches = app.state.index.query(_signatures(body), body.tolerance)[: body.top]
        return schemas.QueryResponse(
            results=[
                schemas.MatchOut(rank=i + 1, audio_id=m.audio_id, offset=m.offset, votes=m.votes)
                for i, m in enumerate(matches)
            ]
        )

    def _get(session_id: str) -> _Session:
        with sessions_lock:
            sess = app.state.sessions.get(session_id)
        if sess is None:
            raise HTTPException(404, f"no session {session_id}")
        return sess

    def _info(session_id: str, eng: DuplexEngine) -> schemas.SessionInfo:
        return schemas.SessionInfo(
            session_id=session_id, mode=eng.mode.value, delays=list(eng.delays), steps=eng.step_counter
        )

    @app.post("/sessions", response_model=schemas.SessionInfo, status_code=201)
    def create_session(body: schemas.SessionCreate):
        if app.state.model is None:
            raise StateError("service started without a model")
        K = len(app.state.model.cardinalities)
        q = (K - 1) // 2 if body.mode == "dialogue" else K - 1
        cfg = EngineConfig(
            q_levels=q,
            acoustic_delay=body.acoustic_delay,
            text_delay_steps=text_delay_steps(body.text_delay_s),
            temperature=body.temperature,
            text_temperature=body.text_temperature,
            seed=body.seed,
            special=SpecialTokens(body.pad_id, body.epad_id),
            pad_target=body.pad_target,
            pad_bonus=body.pad_bonus,
        )
        eng = DuplexEngine(app.state.model, Mode(body.mode), cfg)
        sid = uuid.uuid4().hex
        with sessions_lock:
            app.state.sessions[sid] = _Session(eng)
        return _info(sid, eng)

    @app.get("/sessions/{session_id}", response_model=schemas.SessionInfo)
    def get_session(session_id: str):
        return _info(session_id, _get(session_id).engine)

    @app.post("/sessions/{session_id}/step", response_model=schemas.StepResponse)
    def step(session_id: str, body: schemas.StepRequest):
        sess = _get(session_id)
        with sess.lock:
            eng = sess.engine
            out = {}
            if eng.mode is Mode.TTS:
                sess.queue.extend(body.words)
                eng.step_tts(sess.queue)
                out["finished"] = eng.finished
            else:
                if body.frame is None:
                    raise InputError(f"{eng.mode.value} steps need an audio frame")
                if eng.mode is Mode.DIALOGUE:
                    if body.force_epad:
                        eng.force_epad()
                    res = eng.step_dialogue(body.frame)
                    out["text"], out["frame"] = res.text, res.frame
                else:
                    out["text"] = eng.step_asr(body.frame)
            return schemas.StepResponse(step=eng.step_counter - 1, row=eng.history[-1], **out)

    @app.get("/sessions/{session_id}/log", response_class=PlainTextResponse)
    def session_log(session_id: str):
        return _get(session_id).engine.log_jsonl()

    @app.delete("/sessions/{session_id}", status_code=204)
    def delete_session(session_id: str):
        _get(session_id)
        with sessions_lock:
            app.state.sessions.pop(session_id, None)

    return app
