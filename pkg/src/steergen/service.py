"""HTTP facade for the puppeteer console.

Serves candidate generation under every system configuration, counting-grid
introspection, and session management. Models are loaded once from a model
directory and never mutated; sessions are the only mutable state and each is
guarded by its own lock.

Model directory layout::

    vocab.txt            shared vocabulary
    forward.model        base forward model p(T|S)
    backward.model       backward model p(S|T)
    lm.model             unconditioned LM p(T|null)
    selector.model       sample acceptor
    topic.model          topic-conditioned forward model (optional)
    cg.model             counting grid (optional)
    index.idx            retrieval index (optional)
    personas/<name>/     persona bundles (optional)
"""

from __future__ import annotations

import os
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .corpus import Vocabulary, tokenize
from .counting_grid import CGModel, top_words
from .decoding import Candidate, SelectorModel, generate_candidates, rerank
from .scenting import PersonaBundle, load_persona, rank_retrieve
from .seq2seq import Seq2SeqModel
from .topic_hints import InvertedIndex, cell_hint, hint_posterior, ir_hints

METHODS = (
    "vanilla-sampling",
    "selective-sampling",
    "cg-ir",
    "rank",
    "multiply",
    "finetune",
    "finetune-cg-ir",
    "finetune-cg-topic",
)


@dataclass
class ModelRegistry:
    vocab: Vocabulary
    forward: Seq2SeqModel | None = None
    backward: Seq2SeqModel | None = None
    lm: Seq2SeqModel | None = None
    selector: SelectorModel | None = None
    topic_model: Seq2SeqModel | None = None
    cg: CGModel | None = None
    index: InvertedIndex | None = None
    personas: dict[str, PersonaBundle] = field(default_factory=dict)

    @classmethod
    def load(cls, directory: str) -> "ModelRegistry":
        def path(name):
            return os.path.join(directory, name)

        vocab = Vocabulary.load(path("vocab.txt"))

        def opt(name, loader):
            return loader(path(name)) if os.path.exists(path(name)) else None

        reg = cls(
            vocab=vocab,
            forward=opt("forward.model", lambda p: Seq2SeqModel.load(p, vocab)),
            backward=opt("backward.model", lambda p: Seq2SeqModel.load(p, vocab)),
            lm=opt("lm.model", lambda p: Seq2SeqModel.load(p, vocab)),
            selector=opt("selector.model", SelectorModel.load),
            topic_model=opt("topic.model", lambda p: Seq2SeqModel.load(p, vocab)),
            cg=opt("cg.model", CGModel.load),
            index=opt("index.idx", InvertedIndex.load),
        )
        personas_dir = path("personas")
        if os.path.isdir(personas_dir):
            for name in sorted(os.listdir(personas_dir)):
                full = os.path.join(personas_dir, name)
                if os.path.isdir(full):
                    reg.personas[name] = load_persona(full, vocab)
        return reg


@dataclass
class Session:
    id: str
    transcript: list[dict] = field(default_factory=list)
    persona: str | None = None
    method: str = "selective-sampling"
    last_candidates: list[dict] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def last_user_text(self) -> str | None:
        for turn in reversed(self.transcript):
            if turn["speaker"] == "user":
                return turn["text"]
        return None


class TurnBody(BaseModel):
    text: str


class ChooseBody(BaseModel):
    index: int


class GenerationRequest(BaseModel):
    context: str = ""
    method: str = "selective-sampling"
    persona: str | None = None
    hint_text: str | None = None
    hint_cell: tuple[int, int] | None = None
    n: int = 50
    topn: int = 10
    samples_per_step: int = 10
    max_len: int = 20
    seed: int = 0
    session_id: str | None = None


class PosteriorBody(BaseModel):
    text: str


def _fail(code: int, message: str):
    raise HTTPException(status_code=code, detail=message)


def _require(model, code: int, what: str, hint: str):
    if model is None:
        _fail(code, f"{what} unavailable: {hint}")
    return model


def _candidate_json(cand: Candidate, vocab: Vocabulary, method: str,
                    hint_id: str | None) -> dict:
    return {
        "text": " ".join(cand.words(vocab)),
        "tokens": cand.words(vocab),
        "composite": cand.composite,
        "backward": cand.backward_score,
        "acceptor": cand.acceptor_logsum,
        "multiplicity": cand.multiplicity,
        "method": method,
        "hint_id": hint_id,
    }


def create_app(registry: ModelRegistry) -> FastAPI:
    app = FastAPI(title="steergen service")
    sessions: dict[str, Session] = {}
    sessions_lock = threading.Lock()

    def get_session(session_id: str) -> Session:
        with sessions_lock:
            session = sessions.get(session_id)
        if session is None:
            _fail(404, f"unknown session {session_id!r}")
        return session

    # -- sessions ----------------------------------------------------------

    @app.post("/api/session")
    def create_session():
        session = Session(id=uuid.uuid4().hex)
        with sessions_lock:
            sessions[session.id] = session
        return {"id": session.id}

    @app.get("/api/session/{session_id}")
    def show_session(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return {"id": session.id, "transcript": list(session.transcript),
                    "persona": session.persona, "method": session.method}

    @app.post("/api/session/{session_id}/turn")
    def post_turn(session_id: str, body: TurnBody):
        session = get_session(session_id)
        with session.lock:
            session.transcript.append({"speaker": "user", "text": body.text})
            session.last_candidates = []
            return {"id": session.id, "transcript": list(session.transcript)}

    @app.post("/api/session/{session_id}/choose")
    def choose_candidate(session_id: str, body: ChooseBody):
        session = get_session(session_id)
        with session.lock:
            if not 0 <= body.index < len(session.last_candidates):
                _fail(409, f"candidate index {body.index} is stale: "
                           f"{len(session.last_candidates)} candidates held")
            chosen = session.last_candidates[body.index]
            session.transcript.append({"speaker": "bot", "text": chosen["text"]})
            session.last_candidates = []
            return {"id": session.id, "transcript": list(session.transcript)}

    # -- counting grid -----------------------------------------------------

    @app.get("/api/cg/grid")
    def cg_grid(topk: int = 3):
        cg = _require(registry.cg, 409, "counting grid",
                      "train one with `cg train` and place cg.model in the model dir")
        ex, ey = cg.extent
        cells = []
        for loc in range(ex * ey):
            words = [
                {"word": registry.vocab.word_of(w), "p": p}
                for w, p in top_words(cg, loc, topk)
            ]
            cells.append(words)
        return {"extent": [ex, ey], "window": list(cg.window), "cells": cells}

    @app.post("/api/cg/posterior")
    def cg_posterior(body: PosteriorBody):
        cg = _require(registry.cg, 409, "counting grid",
                      "train one with `cg train` and place cg.model in the model dir")
        vec = hint_posterior(cg, registry.vocab, tokenize(body.text))
        return {"extent": list(cg.extent), "posterior": vec.tolist()}

    # -- personas ----------------------------------------------------------

    @app.get("/api/personas")
    def personas():
        return [
            {"name": name, "methods": bundle.methods(),
             "lambda1": bundle.lambda1, "lambda2": bundle.lambda2}
            for name, bundle in sorted(registry.personas.items())
        ]

    # -- generation --------------------------------------------------------

    def persona_for(req: GenerationRequest) -> PersonaBundle:
        if not req.persona:
            _fail(400, f"method {req.method!r} needs a persona")
        bundle = registry.personas.get(req.persona)
        if bundle is None:
            _fail(404, f"unknown persona {req.persona!r}")
        return bundle

    def hint_for(req: GenerationRequest, cg: CGModel) -> tuple[np.ndarray, str]:
        if req.hint_cell is not None:
            vec = cell_hint(cg, tuple(req.hint_cell), smoothing=cg.window[0])
            return vec, f"cell:{req.hint_cell[0]},{req.hint_cell[1]}"
        if req.hint_text:
            vec = hint_posterior(cg, registry.vocab, tokenize(req.hint_text))
            return vec, f"text:{req.hint_text}"
        _fail(400, "finetune-cg-topic needs hint_text or hint_cell")

    def run_sampling(req: GenerationRequest, forward, selector, src,
                     topic=None, hint_id=None, style_lm=None, lambdas=(1.0, 0.5),
                     vanilla=False, seed_offset=0, n=None):
        backward = _require(registry.backward, 409, "backward model",
                            "train it with `s2s train --role backward`")
        lm = None if vanilla else _require(
            registry.lm, 409, "language model", "train it with `s2s train --role lm`")
        cands = generate_candidates(
            forward, lm, None if vanilla else selector, src,
            n=n or req.n, samples_per_step=1 if vanilla else req.samples_per_step,
            max_len=req.max_len, topic=topic, seed=(req.seed, seed_offset),
            style_lm=style_lm, lambda1=lambdas[0], lambda2=lambdas[1],
        )
        ranked = rerank(cands, backward, src)
        return [_candidate_json(c, registry.vocab, req.method, hint_id)
                for c in ranked]

    def dispatch(req: GenerationRequest, src: list[str]) -> list[dict]:
        method = req.method
        forward = _require(registry.forward, 409, "forward model",
                           "train it with `s2s train --role forward`")
        selector = registry.selector
        if method == "vanilla-sampling":
            return run_sampling(req, forward, None, src, vanilla=True)
        if method == "selective-sampling":
            _require(selector, 409, "selector",
                     "train it with `s2s train-selector`")
            return run_sampling(req, forward, selector, src)
        if method == "rank":
            bundle = persona_for(req)
            backward = _require(registry.backward, 409, "backward model",
                                "train it with `s2s train --role backward`")
            hits = rank_retrieve(src, bundle, backward, k=req.topn)
            return [
                {"text": " ".join(sent), "tokens": sent, "composite": score,
                 "backward": score, "acceptor": 0.0, "multiplicity": 1,
                 "method": method, "hint_id": None}
                for sent, score in hits
            ]
        if method == "multiply":
            bundle = persona_for(req)
            style_lm = bundle.style_lm
            if style_lm is None:
                _fail(409, f"persona {bundle.name!r} has no styled LM: "
                           f"train one and save it as lm.model in the persona dir")
            _require(selector, 409, "selector", "train it with `s2s train-selector`")
            return run_sampling(req, forward, selector, src, style_lm=style_lm,
                                lambdas=(bundle.lambda1, bundle.lambda2))
        if method == "finetune":
            bundle = persona_for(req)
            styled = bundle.finetuned
            if styled is None:
                _fail(409, f"persona {bundle.name!r} has no finetuned model: "
                           f"build one with `scent finetune`")
            _require(selector, 409, "selector", "train it with `s2s train-selector`")
            return run_sampling(req, styled, bundle.styled_selector or selector, src)
        if method in ("cg-ir", "finetune-cg-ir", "finetune-cg-topic"):
            cg = _require(registry.cg, 409, "counting grid",
                          "train one with `cg train`")
            if method == "cg-ir":
                model = registry.topic_model
                if model is None:
                    _fail(409, "no topic-conditioned model: train one with "
                               "`s2s train --topic-width ... --cg cg.model` "
                               "and save it as topic.model")
            else:
                bundle = persona_for(req)
                model = bundle.finetuned
                if model is None or model.config.topic_width == 0:
                    _fail(409, f"persona {req.persona!r} has no topic-conditioned "
                               f"finetuned model")
            if model.config.topic_width != cg.n_locations:
                _fail(409, f"topic model width {model.config.topic_width} != "
                           f"grid size {cg.n_locations}")
            _require(selector, 409, "selector", "train it with `s2s train-selector`")
            if method == "finetune-cg-topic":
                vec, hint_id = hint_for(req, cg)
                return run_sampling(req, model, selector, src, topic=vec,
                                    hint_id=hint_id)
            index = _require(registry.index, 409, "retrieval index",
                             "build one with `hints build-index`")
            hints = ir_hints(index, cg, registry.vocab, src, k=10)
            if not hints:
                hints = [hint_posterior(cg, registry.vocab, [])]
            per_hint = max(1, req.n // len(hints))
            out = []
            for h_idx, vec in enumerate(hints):
                out.extend(
                    run_sampling(req, model, selector, src, topic=vec,
                                 hint_id=f"ir:{h_idx}", seed_offset=h_idx,
                                 n=per_hint)
                )
            out.sort(key=lambda c: -(c["composite"] or 0.0))
            return out
        _fail(400, f"unknown method {method!r}; known: {', '.join(METHODS)}")

    @app.post("/api/generate")
    def generate(req: GenerationRequest):
        if req.method not in METHODS:
            _fail(400, f"unknown method {req.method!r}; known: {', '.join(METHODS)}")
        session = get_session(req.session_id) if req.session_id else None
        context = req.context
        if not context and session is not None:
            context = session.last_user_text() or ""
        if not context.strip():
            _fail(400, "no context: supply text or a session with a user turn")
        src = tokenize(context)
        candidates = dispatch(req, src)[: req.topn]
        if session is not None:
            with session.lock:
                session.method = req.method
                session.persona = req.persona
                session.last_candidates = candidates
        return {"method": req.method, "persona": req.persona,
                "context": context, "candidates": candidates}

    return app


def create_app_from_dir(directory: str) -> FastAPI:
    return create_app(ModelRegistry.load(directory))
