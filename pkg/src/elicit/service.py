"""HTTP service hosting live elicitation sessions.

A session owns one elicitation loop: the strategy proposes a pair, the
client answers, the model updates, and metrics accumulate at the
configured cadence. Sessions survive restarts through an append-only
event log plus periodic state snapshots; replaying the log through the
same update path reproduces the in-memory state exactly.

Mutating calls on a session are serialized by a per-session lock, so
concurrent submissions cannot interleave model updates. Evaluations run
on a worker thread off the request path; the session reports a
``computing`` flag while one is in flight.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from .data import DataError, Dataset, atomic_write_text, load_dataset
from .ep import EPConfig, EPState, ep_fit, ep_incorporate
from .evaluation import TracePoint, loo_cv
from .knowledge import GeneSet, descriptions_from_csv, parse_gmt
from .model import (
    FeedbackAnswer,
    FeedbackEvent,
    FeedbackSet,
    Hyperparameters,
    ModelError,
)
from .strategies import (
    BanditState,
    CandidatePool,
    Pair,
    StrategyError,
    bandit_init,
    bandit_select,
    bandit_update,
    eig_select,
    pool_from_csv,
    random_select,
)

STRATEGIES = ("eig", "bandit", "random")

DATASET_FILES = ("data.tsv", "response.tsv")


class ServiceError(Exception):
    """Request failure carried to the client as JSON {code, message}."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _invalid(message: str) -> ServiceError:
    return ServiceError(400, "invalid", message)


def _not_found(message: str) -> ServiceError:
    return ServiceError(404, "not_found", message)


def _conflict(message: str) -> ServiceError:
    return ServiceError(409, "conflict", message)


# ---------------------------------------------------------------------------
# Configuration

CONFIG_KEYS = (
    "host",
    "port",
    "data_dir",
    "default_strategy",
    "default_cadence",
    "default_seed",
    "snapshot_every",
)


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    data_dir: str = "elicit-data"
    default_strategy: str = "random"
    default_cadence: int = 25
    default_seed: int = 0
    snapshot_every: int = 20

    def __post_init__(self):
        if self.default_strategy not in STRATEGIES:
            raise DataError(f"unknown default strategy {self.default_strategy!r}")
        if self.default_cadence < 1 or self.snapshot_every < 1:
            raise DataError("cadence and snapshot interval must be >= 1")


def load_service_config(
    path: str | Path | None = None, env: Mapping[str, str] | None = None
) -> ServiceConfig:
    """Flat key=value config file, then ELICIT_* environment overrides."""
    values: dict[str, str] = {}
    if path is not None:
        for ln_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"config line {ln_no}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise DataError(f"config line {ln_no}: unknown key {key!r}")
            values[key] = val.strip()
    env = os.environ if env is None else env
    for key in CONFIG_KEYS:
        override = env.get("ELICIT_" + key.upper())
        if override is not None:
            values[key] = override
    kwargs: dict[str, Any] = dict(values)
    for int_key in ("port", "default_cadence", "default_seed", "snapshot_every"):
        if int_key in kwargs:
            try:
                kwargs[int_key] = int(kwargs[int_key])
            except ValueError:
                raise DataError(f"config key {int_key} must be an integer") from None
    return ServiceConfig(**kwargs)


@dataclass(frozen=True)
class SessionConfig:
    """Config snapshot persisted in the created event."""

    dataset_dir: str
    strategy: str
    budget: int
    cadence: int
    seed: int
    pool_csv: str | None = None
    descriptions_csv: str | None = None
    pathways_gmt: str | None = None
    broadcast: bool = False


# ---------------------------------------------------------------------------
# Session runtime state


@dataclass
class Session:
    id: str
    cfg: SessionConfig
    dataset: Dataset
    pool: CandidatePool
    state: EPState
    feedback: FeedbackSet
    gene_sets: list[GeneSet] = field(default_factory=list)
    descriptions: dict[Pair, np.ndarray] | None = None
    bandit: BanditState | None = None
    bandit_pseudo: dict[Pair, float] | None = None
    rng: np.random.Generator | None = None
    in_flight: Pair | None = None
    last_scores: list[dict] = field(default_factory=list)
    ordinal: int = 0
    status: str = "active"
    created: float = 0.0
    updated: float = 0.0
    trace_points: list[TracePoint] = field(default_factory=list)
    trace_queries: list[tuple[int, Pair, FeedbackAnswer]] = field(default_factory=list)
    events_count: int = 0
    computing: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock)
    eval_lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def answered(self) -> int:
        return len({it for it, _, _ in self.trace_queries})


# ---------------------------------------------------------------------------
# Persistence


def _event_path(root: Path, session_id: str) -> Path:
    return root / "sessions" / session_id / "events.jsonl"


def _snapshot_path(root: Path, session_id: str) -> Path:
    return root / "sessions" / session_id / "snapshot.json"


class SessionStore:
    """Owns session lifecycle, the event log, and restart recovery."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.root = Path(config.data_dir)
        self.sessions: dict[str, Session] = {}
        self._store_lock = threading.Lock()
        (self.root / "sessions").mkdir(parents=True, exist_ok=True)
        for events in sorted(self.root.glob("sessions/*/events.jsonl")):
            sess = self._load_session(events.parent.name)
            self.sessions[sess.id] = sess

    # -- helpers

    def get(self, session_id: str) -> Session:
        sess = self.sessions.get(session_id)
        if sess is None:
            raise _not_found(f"no session {session_id!r}")
        return sess

    def _resolve(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.root / p

    def _append_event(self, sess: Session, event: dict) -> None:
        path = _event_path(self.root, sess.id)
        with path.open("a") as fh:
            fh.write(json.dumps(event) + "\n")
        sess.events_count += 1
        sess.updated = event["time"]
        if sess.events_count % self.config.snapshot_every == 0:
            self._write_snapshot(sess)

    # -- session assembly shared by create and replay

    def _build_base(self, cfg: SessionConfig, session_id: str) -> Session:
        """Load inputs and fit the no-feedback model; pure given cfg."""
        ddir = self._resolve(cfg.dataset_dir)
        for fname in DATASET_FILES:
            if not (ddir / fname).is_file():
                raise _not_found(f"dataset file {fname} missing under {ddir}")
        features = ddir / "features.tsv"
        drugs = ddir / "drugs.tsv"
        try:
            dataset = load_dataset(
                ddir / "data.tsv",
                ddir / "response.tsv",
                features if features.is_file() else None,
                drugs if drugs.is_file() else None,
            )
        except DataError as exc:
            raise _invalid(f"dataset: {exc}") from None

        if cfg.pool_csv is not None:
            try:
                pool = pool_from_csv(self._resolve(cfg.pool_csv).read_text())
            except (OSError, StrategyError) as exc:
                raise _invalid(f"pool: {exc}") from None
            known = {(d.id, f.id) for d in dataset.drugs for f in dataset.features}
            for pair in pool.pairs:
                if pair not in known:
                    raise _invalid(f"pool pair {pair} not in dataset")
        else:
            pool = CandidatePool(
                pairs=[(d.id, f.id) for f in dataset.features for d in dataset.drugs]
            )

        gene_sets: list[GeneSet] = []
        if cfg.pathways_gmt is not None:
            try:
                with self._resolve(cfg.pathways_gmt).open() as fh:
                    gene_sets = parse_gmt(fh)
            except (OSError, DataError) as exc:
                raise _invalid(f"pathways: {exc}") from None

        descriptions = None
        if cfg.descriptions_csv is not None:
            try:
                _, descriptions = descriptions_from_csv(
                    self._resolve(cfg.descriptions_csv).read_text()
                )
            except (OSError, DataError) as exc:
                raise _invalid(f"descriptions: {exc}") from None
        if cfg.strategy == "bandit" and descriptions is None:
            raise _invalid("bandit strategy needs descriptions_csv")

        feedback = FeedbackSet()
        state = ep_fit(dataset, feedback, Hyperparameters(), EPConfig())
        sess = Session(
            id=session_id,
            cfg=cfg,
            dataset=dataset,
            pool=pool,
            state=state,
            feedback=feedback,
            gene_sets=gene_sets,
            descriptions=descriptions,
        )
        if cfg.strategy == "bandit":
            sess.bandit_pseudo = {
                (d, f): float(state.inclusion(d)[dataset.feature_index(f)])
                for d, f in pool.pairs
            }
            sess.bandit = bandit_init(descriptions, sess.bandit_pseudo, pool)
        if cfg.strategy == "random":
            sess.rng = np.random.default_rng(cfg.seed)
        return sess

    # -- event application (used live and during replay)

    def _apply_selected(self, sess: Session, event: dict) -> None:
        """Replay of a selection; never used on the live path."""
        pair = (event["drug_id"], event["feature_id"])
        sess.ordinal = event["ordinal"]
        sess.in_flight = pair
        if sess.cfg.strategy == "random" and sess.rng is not None:
            # consume the draw the original selection made, keeping the
            # stream position identical after replay
            sess.rng.integers(len(sess.pool.unqueried()))

    def _apply_answered(self, sess: Session, event: dict) -> None:
        pair = (event["drug_id"], event["feature_id"])
        answer = FeedbackAnswer(event["answer"])
        it = event["ordinal"]
        sess.in_flight = None
        targets = [pair]
        if sess.cfg.broadcast:
            group_of = {d.id: d.group for d in sess.dataset.drugs}
            unqueried = set(sess.pool.unqueried())
            for drug in sess.dataset.drugs:
                sibling = (drug.id, pair[1])
                if drug.id == pair[0] or group_of[drug.id] != group_of[pair[0]]:
                    continue
                if sibling in unqueried:
                    targets.append(sibling)
        for tgt in targets:
            sess.pool.mark_queried(tgt)
            fb_event = FeedbackEvent(
                drug_id=tgt[0], feature_id=tgt[1], answer=answer, iteration=it
            )
            sess.feedback.add(fb_event)
            sess.state = ep_incorporate(sess.state, fb_event)
            sess.trace_queries.append((it, tgt, answer))
        if sess.bandit is not None:
            sess.bandit = bandit_update(sess.bandit, pair, answer)
        if sess.ordinal >= sess.cfg.budget or not sess.pool.unqueried():
            sess.status = "completed"

    def _apply_evaluated(self, sess: Session, event: dict) -> None:
        sess.trace_points.append(
            TracePoint(
                iteration=event["iteration"],
                mse_per_drug=np.array(event["mse_per_drug"]),
                c_index_per_drug=np.array(event["c_index_per_drug"]),
                wall_time=event["wall_time"],
            )
        )

    def _apply_status(self, sess: Session, event: dict) -> None:
        sess.status = event["status"]

    # -- snapshot round trip

    def _write_snapshot(self, sess: Session) -> None:
        snap = {
            "applied_events": sess.events_count,
            "id": sess.id,
            "config": asdict(sess.cfg),
            "status": sess.status,
            "created": sess.created,
            "updated": sess.updated,
            "ordinal": sess.ordinal,
            "in_flight": list(sess.in_flight) if sess.in_flight else None,
            "last_scores": sess.last_scores,
            "rng_state": _rng_state_to_json(sess.rng),
            "ep_state": sess.state.to_dict(),
            "feedback": [
                [ev.iteration, ev.drug_id, ev.feature_id, ev.answer.value]
                for ev in sess.feedback
            ],
            "queried": [list(p) for p in sess.pool.queried],
            "trace_points": [
                {
                    "iteration": tp.iteration,
                    "mse_per_drug": [float(v) for v in tp.mse_per_drug],
                    "c_index_per_drug": [float(v) for v in tp.c_index_per_drug],
                    "wall_time": tp.wall_time,
                }
                for tp in sess.trace_points
            ],
            "trace_queries": [
                [it, p[0], p[1], a.value] for it, p, a in sess.trace_queries
            ],
            "bandit_pseudo": (
                None
                if sess.bandit_pseudo is None
                else [[d, f, g] for (d, f), g in sess.bandit_pseudo.items()]
            ),
        }
        atomic_write_text(_snapshot_path(self.root, sess.id), json.dumps(snap))

    def _load_session(self, session_id: str) -> Session:
        events_path = _event_path(self.root, session_id)
        lines = [
            json.loads(ln)
            for ln in events_path.read_text().splitlines()
            if ln.strip()
        ]
        if not lines or lines[0]["event"] != "created":
            raise DataError(f"corrupt event log for session {session_id}")
        cfg = SessionConfig(**lines[0]["config"])

        snap_path = _snapshot_path(self.root, session_id)
        snap = json.loads(snap_path.read_text()) if snap_path.is_file() else None
        if snap is not None:
            sess = self._restore_snapshot(session_id, cfg, snap)
            start = snap["applied_events"]
        else:
            sess = self._build_base(cfg, session_id)
            sess.created = lines[0]["time"]
            sess.updated = lines[0]["time"]
            start = 1

        for event in lines[start:]:
            kind = event["event"]
            if kind == "selected":
                self._apply_selected(sess, event)
            elif kind == "answered":
                self._apply_answered(sess, event)
            elif kind == "evaluated":
                self._apply_evaluated(sess, event)
            elif kind == "status":
                self._apply_status(sess, event)
            sess.updated = event["time"]
        sess.events_count = len(lines)
        return sess

    def _restore_snapshot(
        self, session_id: str, cfg: SessionConfig, snap: dict
    ) -> Session:
        sess = self._build_light(cfg, session_id)
        sess.state = EPState.from_dict(
            sess.dataset, Hyperparameters(), EPConfig(), snap["ep_state"]
        )
        for it, d, f, a in snap["feedback"]:
            sess.feedback.add(
                FeedbackEvent(
                    drug_id=d, feature_id=f, answer=FeedbackAnswer(a), iteration=it
                )
            )
        for d, f in snap["queried"]:
            sess.pool.mark_queried((d, f))
        sess.status = snap["status"]
        sess.created = snap["created"]
        sess.updated = snap["updated"]
        sess.ordinal = snap["ordinal"]
        sess.in_flight = tuple(snap["in_flight"]) if snap["in_flight"] else None
        sess.last_scores = snap["last_scores"]
        if snap["rng_state"] is not None:
            sess.rng = np.random.default_rng(cfg.seed)
            sess.rng.bit_generator.state = _rng_state_from_json(snap["rng_state"])
        for tp in snap["trace_points"]:
            sess.trace_points.append(
                TracePoint(
                    iteration=tp["iteration"],
                    mse_per_drug=np.array(tp["mse_per_drug"]),
                    c_index_per_drug=np.array(tp["c_index_per_drug"]),
                    wall_time=tp["wall_time"],
                )
            )
        for it, d, f, a in snap["trace_queries"]:
            sess.trace_queries.append((it, (d, f), FeedbackAnswer(a)))
        if snap["bandit_pseudo"] is not None:
            sess.bandit_pseudo = {(d, f): g for d, f, g in snap["bandit_pseudo"]}
            pool0 = CandidatePool(pairs=list(sess.pool.pairs))
            sess.bandit = bandit_init(sess.descriptions, sess.bandit_pseudo, pool0)
            # only the queried pair of each ordinal fed the bandit; broadcast
            # copies follow it in trace order and are skipped here
            seen: set[int] = set()
            for it, pair, answer in sess.trace_queries:
                if it in seen:
                    continue
                seen.add(it)
                sess.bandit = bandit_update(sess.bandit, pair, answer)
        return sess

    def _build_light(self, cfg: SessionConfig, session_id: str) -> Session:
        """Like _build_base but without the model fit (snapshot provides it)."""
        ddir = self._resolve(cfg.dataset_dir)
        dataset = load_dataset(
            ddir / "data.tsv",
            ddir / "response.tsv",
            (ddir / "features.tsv") if (ddir / "features.tsv").is_file() else None,
            (ddir / "drugs.tsv") if (ddir / "drugs.tsv").is_file() else None,
        )
        if cfg.pool_csv is not None:
            pool = pool_from_csv(self._resolve(cfg.pool_csv).read_text())
            pool = CandidatePool(pairs=list(pool.pairs))
        else:
            pool = CandidatePool(
                pairs=[(d.id, f.id) for f in dataset.features for d in dataset.drugs]
            )
        gene_sets: list[GeneSet] = []
        if cfg.pathways_gmt is not None:
            with self._resolve(cfg.pathways_gmt).open() as fh:
                gene_sets = parse_gmt(fh)
        descriptions = None
        if cfg.descriptions_csv is not None:
            _, descriptions = descriptions_from_csv(
                self._resolve(cfg.descriptions_csv).read_text()
            )
        dummy = FeedbackSet()
        return Session(
            id=session_id,
            cfg=cfg,
            dataset=dataset,
            pool=pool,
            state=None,  # type: ignore[arg-type]  # snapshot restore fills it
            feedback=dummy,
            gene_sets=gene_sets,
            descriptions=descriptions,
        )

    # -- public operations

    def create_session(self, body: dict) -> Session:
        cfg = _session_config_from_body(body, self.config)
        session_id = uuid.uuid4().hex
        sess = self._build_base(cfg, session_id)
        now = time.time()
        sess.created = now
        sess.updated = now
        _event_path(self.root, session_id).parent.mkdir(parents=True, exist_ok=True)
        self._append_event(
            sess, {"event": "created", "config": asdict(cfg), "time": now}
        )
        self._write_snapshot(sess)
        with self._store_lock:
            self.sessions[session_id] = sess
        return sess

    def next_query(self, sess: Session) -> dict | None:
        with sess.lock:
            if sess.status != "active":
                return None
            if sess.in_flight is not None:
                return _query_card(sess, sess.in_flight)
            if sess.ordinal >= sess.cfg.budget or not sess.pool.unqueried():
                sess.status = "completed"
                self._append_event(
                    sess,
                    {"event": "status", "status": "completed", "time": time.time()},
                )
                return None
            ordinal = sess.ordinal + 1
            if sess.cfg.strategy == "eig":
                pair, scores = eig_select(sess.state, sess.pool)
                sess.last_scores = _score_rows(scores, pair)
            elif sess.cfg.strategy == "bandit":
                pair, scores = bandit_select(sess.bandit, sess.pool, t=ordinal)
                sess.last_scores = _score_rows(scores, pair)
            else:
                pair = random_select(sess.pool, sess.rng)
                sess.last_scores = []
            sess.ordinal = ordinal
            sess.in_flight = pair
            self._append_event(
                sess,
                {
                    "event": "selected",
                    "ordinal": ordinal,
                    "drug_id": pair[0],
                    "feature_id": pair[1],
                    "time": time.time(),
                },
            )
            return _query_card(sess, pair)

    def submit_answer(self, sess: Session, body: dict) -> dict:
        pair = (str(body.get("drug_id", "")), str(body.get("feature_id", "")))
        raw = body.get("answer")
        try:
            answer = FeedbackAnswer(raw)
        except ValueError:
            raise _invalid(f"unknown answer {raw!r}") from None
        with sess.lock:
            if sess.status != "active":
                raise _conflict(f"session is {sess.status}")
            if sess.in_flight is None:
                raise _conflict("no query in flight")
            if pair != sess.in_flight:
                raise _conflict(
                    f"answer for {pair} but in-flight query is {sess.in_flight}"
                )
            event = {
                "event": "answered",
                "ordinal": sess.ordinal,
                "drug_id": pair[0],
                "feature_id": pair[1],
                "answer": answer.value,
                "time": time.time(),
            }
            self._apply_answered(sess, event)
            self._append_event(sess, event)
            if sess.status == "completed":
                self._append_event(
                    sess,
                    {"event": "status", "status": "completed", "time": time.time()},
                )
            iteration = sess.ordinal
            due = iteration % sess.cfg.cadence == 0 or sess.status == "completed"
            payload = None
            if due:
                payload = (sess.state, sess.feedback.copy(), iteration)
        if payload is not None:
            worker = threading.Thread(
                target=self._evaluate_payload, args=(sess,) + payload, daemon=True
            )
            worker.start()
        return {
            "iteration": iteration,
            "status": sess.status,
            "evaluating": payload is not None,
            "last_point": _point_row(sess.trace_points[-1]) if sess.trace_points else None,
        }

    def evaluate_now(self, sess: Session) -> dict:
        with sess.lock:
            if sess.state is None:
                raise _conflict("session not initialized")
            payload = (sess.state, sess.feedback.copy(), sess.answered)
        point = self._evaluate_payload(sess, *payload)
        return _point_row(point)

    def _evaluate_payload(
        self, sess: Session, state: EPState, feedback: FeedbackSet, iteration: int
    ) -> TracePoint:
        with sess.eval_lock:
            sess.computing = True
            try:
                t0 = time.perf_counter()
                res = loo_cv(sess.dataset, feedback, warm_start=state)
                point = TracePoint(
                    iteration=iteration,
                    mse_per_drug=res.mse_per_drug,
                    c_index_per_drug=res.c_index_per_drug,
                    wall_time=time.perf_counter() - t0,
                )
                with sess.lock:
                    sess.trace_points.append(point)
                    self._append_event(
                        sess,
                        {
                            "event": "evaluated",
                            "iteration": iteration,
                            "mse_per_drug": [float(v) for v in point.mse_per_drug],
                            "c_index_per_drug": [
                                float(v) for v in point.c_index_per_drug
                            ],
                            "wall_time": point.wall_time,
                            "time": time.time(),
                        },
                    )
                return point
            finally:
                sess.computing = False

    def get_state(self, sess: Session) -> dict:
        with sess.lock:
            return _state_snapshot(sess)

    def export_feedback(self, sess: Session) -> str:
        with sess.lock:
            lines = ["iteration,drug_id,feature_id,answer"]
            for it, pair, answer in sess.trace_queries:
                lines.append(f"{it},{pair[0]},{pair[1]},{answer.value}")
            return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSON shapes


def _session_config_from_body(body: dict, config: ServiceConfig) -> SessionConfig:
    if not isinstance(body, dict):
        raise _invalid("request body must be a JSON object")
    if "dataset_dir" not in body:
        raise _invalid("dataset_dir is required")
    strategy = body.get("strategy", config.default_strategy)
    if strategy not in STRATEGIES:
        raise _invalid(f"unknown strategy {strategy!r}")
    try:
        budget = int(body.get("budget", 0))
        cadence = int(body.get("cadence", config.default_cadence))
        seed = int(body.get("seed", config.default_seed))
    except (TypeError, ValueError):
        raise _invalid("budget, cadence, and seed must be integers") from None
    if budget < 0:
        raise _invalid("budget must be >= 0")
    if cadence < 1:
        raise _invalid("cadence must be >= 1")
    return SessionConfig(
        dataset_dir=str(body["dataset_dir"]),
        strategy=strategy,
        budget=budget,
        cadence=cadence,
        seed=seed,
        pool_csv=body.get("pool_csv"),
        descriptions_csv=body.get("descriptions_csv"),
        pathways_gmt=body.get("pathways_gmt"),
        broadcast=bool(body.get("broadcast", False)),
    )


def _score_rows(scores, chosen: Pair, keep: int = 20) -> list[dict]:
    rows = []
    for s in scores[:keep]:
        rows.append(
            {
                "drug_id": s.pair[0],
                "feature_id": s.pair[1],
                "score": float(s.score),
                "chosen": s.pair == chosen,
            }
        )
    return rows


def _query_card(sess: Session, pair: Pair) -> dict:
    drug_id, feature_id = pair
    ds = sess.dataset
    drug = ds.drugs[ds.drug_index(drug_id)]
    feature = ds.features[ds.feature_index(feature_id)]
    k = ds.feature_index(feature_id)
    gene = feature.gene or ""
    pathways = [
        gs.name
        for gs in sess.gene_sets
        if gene and gene.strip().upper() in gs.genes
    ]
    return {
        "drug_id": drug_id,
        "feature_id": feature_id,
        "ordinal": sess.ordinal,
        "remaining_budget": sess.cfg.budget - sess.ordinal,
        "context": {
            "drug_name": drug.name,
            "drug_group": drug.group,
            "drug_targets": sorted(drug.targets),
            "feature_gene": gene,
            "feature_kind": feature.kind,
            "pathways": pathways,
            "inclusion": float(sess.state.inclusion(drug_id)[k]),
            "weight_mean": float(sess.state.weight_mean(drug_id)[k]),
            "weight_sd": float(sess.state.weight_sd(drug_id)[k]),
        },
    }


def _point_row(tp: TracePoint) -> dict:
    return {
        "iteration": tp.iteration,
        "mse_mean": float(np.mean(tp.mse_per_drug)),
        "c_index_mean": float(np.mean(tp.c_index_per_drug)),
        "mse_per_drug": [float(v) for v in tp.mse_per_drug],
        "c_index_per_drug": [float(v) for v in tp.c_index_per_drug],
        "wall_time": tp.wall_time,
    }


def _state_snapshot(sess: Session, top: int = 10) -> dict:
    per_drug = []
    for drug in sess.dataset.drugs:
        g = sess.state.inclusion(drug.id)
        mean = sess.state.weight_mean(drug.id)
        sd = sess.state.weight_sd(drug.id)
        order = np.argsort(-g)[:top]
        per_drug.append(
            {
                "drug_id": drug.id,
                "expected_pi": float(sess.state.expected_pi(drug.id)),
                "noise_variance": float(sess.state.expected_noise_variance(drug.id)),
                "mean_inclusion": float(np.mean(g)),
                "top_features": [
                    {
                        "feature_id": sess.dataset.features[int(k)].id,
                        "inclusion": float(g[int(k)]),
                        "weight_mean": float(mean[int(k)]),
                        "weight_sd": float(sd[int(k)]),
                    }
                    for k in order
                ],
            }
        )
    return {
        "id": sess.id,
        "status": sess.status,
        "computing": sess.computing,
        "strategy": sess.cfg.strategy,
        "budget": sess.cfg.budget,
        "cadence": sess.cfg.cadence,
        "seed": sess.cfg.seed,
        "broadcast": sess.cfg.broadcast,
        "created": sess.created,
        "updated": sess.updated,
        "ordinal": sess.ordinal,
        "answered": sess.answered,
        "remaining_budget": sess.cfg.budget - sess.ordinal,
        "in_flight": list(sess.in_flight) if sess.in_flight else None,
        "queried": len(sess.pool.queried),
        "pool_size": len(sess.pool.pairs),
        "last_scores": sess.last_scores,
        "trace": {
            "points": [_point_row(tp) for tp in sess.trace_points],
            "queries": [
                [it, p[0], p[1], a.value] for it, p, a in sess.trace_queries
            ],
        },
        "posterior": {"per_drug": per_drug},
    }


def _rng_state_to_json(rng: np.random.Generator | None) -> dict | None:
    if rng is None:
        return None
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: str(v) for k, v in state["state"].items()},
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _rng_state_from_json(payload: dict) -> dict:
    return {
        "bit_generator": payload["bit_generator"],
        "state": {k: int(v) for k, v in payload["state"].items()},
        "has_uint32": payload["has_uint32"],
        "uinteger": payload["uinteger"],
    }


# ---------------------------------------------------------------------------
# FastAPI wiring


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="elicit session service")
    store = SessionStore(config)
    app.state.store = store

    @app.exception_handler(ServiceError)
    async def _service_error(_: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status, content={"code": exc.code, "message": exc.message}
        )

    @app.exception_handler(ModelError)
    async def _model_error(_: Request, exc: ModelError):
        return JSONResponse(
            status_code=409, content={"code": "conflict", "message": str(exc)}
        )

    @app.exception_handler(StrategyError)
    async def _strategy_error(_: Request, exc: StrategyError):
        return JSONResponse(
            status_code=400, content={"code": "invalid", "message": str(exc)}
        )

    @app.post("/sessions", status_code=201)
    def create_session(body: dict):
        sess = store.create_session(body)
        return {"id": sess.id, "status": sess.status}

    @app.get("/sessions/{session_id}/query")
    def next_query(session_id: str):
        sess = store.get(session_id)
        card = store.next_query(sess)
        return {"status": sess.status, "card": card}

    @app.post("/sessions/{session_id}/answers")
    def submit_answer(session_id: str, body: dict):
        sess = store.get(session_id)
        return store.submit_answer(sess, body)

    @app.get("/sessions/{session_id}/state")
    def get_state(session_id: str):
        sess = store.get(session_id)
        return store.get_state(sess)

    @app.post("/sessions/{session_id}/evaluate")
    def evaluate(session_id: str):
        sess = store.get(session_id)
        return store.evaluate_now(sess)

    @app.get("/sessions/{session_id}/export")
    def export(session_id: str):
        sess = store.get(session_id)
        return PlainTextResponse(
            store.export_feedback(sess), media_type="text/csv"
        )

    return app


def serve(config: ServiceConfig) -> None:
    """Run the service until interrupted; import uvicorn lazily."""
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port)
