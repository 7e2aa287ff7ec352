"""Blinded pairwise preference evaluation.

Pairs carry both models' responses with a seeded fair-coin side assignment;
model names live only in server-side metadata, never in annotator-facing
payloads.  Judgments (human or model) accumulate in an append-only log and
aggregate into a win matrix with won-both / lost-both counts against a
baseline set.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

CHOICES = ("A", "B", "tie")


class PreferenceError(ValueError):
    pass


class JudgeProtocolError(RuntimeError):
    """The judge replied, but not with a parseable verdict."""


@dataclass(frozen=True)
class PreferencePair:
    pair_id: str
    prompt: str
    model_a: str  # hidden from annotators
    model_b: str
    response_a: str
    response_b: str
    assignment_seed: int

    def annotator_view(self) -> dict:
        """The only shape that may cross the wire to an annotator."""
        return {
            "pair_id": self.pair_id,
            "prompt": self.prompt,
            "response_a": self.response_a,
            "response_b": self.response_b,
        }

    def as_record(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "prompt": self.prompt,
            "model_a": self.model_a,
            "model_b": self.model_b,
            "response_a": self.response_a,
            "response_b": self.response_b,
            "assignment_seed": self.assignment_seed,
        }


@dataclass(frozen=True)
class Judgment:
    pair_id: str
    choice: str  # A | B | tie
    judge: str  # human | model
    annotator_id: str
    timestamp: float = field(default_factory=time.time)

    def __post_init__(self):
        if self.choice not in CHOICES:
            raise PreferenceError(f"invalid choice {self.choice!r}")
        if self.judge not in ("human", "model"):
            raise PreferenceError(f"invalid judge kind {self.judge!r}")

    def as_record(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "choice": self.choice,
            "judge": self.judge,
            "annotator_id": self.annotator_id,
            "timestamp": self.timestamp,
        }


GenerateFn = Callable[[str], str]


def build_preference_batch(
    models: list[tuple[str, GenerateFn]],
    prompts: list[str],
    seed: int = 0,
) -> list[PreferencePair]:
    """One pair per unordered model pair per prompt, sides coin-flipped."""
    if len(models) < 2:
        raise PreferenceError("need at least 2 models to build preference pairs")
    names = [name for name, _ in models]
    if len(set(names)) != len(names):
        raise PreferenceError("model names must be unique")
    rng = np.random.default_rng(seed)
    pairs: list[PreferencePair] = []
    for (name_x, gen_x), (name_y, gen_y) in itertools.combinations(models, 2):
        for idx, prompt in enumerate(prompts):
            try:
                resp_x = gen_x(prompt)
                resp_y = gen_y(prompt)
            except Exception as exc:
                raise PreferenceError(
                    f"generation failed for prompt {idx} ({name_x} vs {name_y}): {exc}"
                ) from exc
            flip = bool(rng.integers(0, 2))
            if flip:
                a_name, a_resp, b_name, b_resp = name_y, resp_y, name_x, resp_x
            else:
                a_name, a_resp, b_name, b_resp = name_x, resp_x, name_y, resp_y
            pairs.append(
                PreferencePair(
                    # ids are opaque: they travel to annotators and must not
                    # hint at which models produced the pair
                    pair_id=f"pair-{len(pairs):05d}",
                    prompt=prompt,
                    model_a=a_name,
                    model_b=b_name,
                    response_a=a_resp,
                    response_b=b_resp,
                    assignment_seed=seed,
                )
            )
    return pairs


class JudgeClient(Protocol):
    name: str

    def verdict(self, prompt: str, response_a: str, response_b: str) -> str:
        """Raw reply text; judge_with_model parses it strictly."""


class MockJudge:
    """Deterministic pipeline-test judge: prefers the longer response.

    The rule carries no semantic weight; it exists so the judging path can
    be exercised end to end without an external service.
    """

    name = "mock"

    def verdict(self, prompt: str, response_a: str, response_b: str) -> str:
        if len(response_a) > len(response_b):
            return "A"
        if len(response_b) > len(response_a):
            return "B"
        return "tie"


class HttpJudge:
    """POSTs {prompt, response_a, response_b} and expects {"verdict": ...}."""

    name = "http"

    def __init__(self, endpoint: str, token: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout

    def verdict(self, prompt: str, response_a: str, response_b: str) -> str:
        import httpx

        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        resp = httpx.post(
            self.endpoint,
            json={"prompt": prompt, "response_a": response_a, "response_b": response_b},
            headers=headers,
            timeout=self.timeout,
        )
        resp.raise_for_status()
        return str(resp.json().get("verdict", ""))


def judge_with_model(
    pair: PreferencePair,
    judge: JudgeClient,
    max_retries: int = 3,
    backoff: float = 0.5,
    sleep=time.sleep,
) -> Judgment:
    """Ask the judge client for a verdict; transport errors retry with backoff.

    An unparseable reply is a protocol error, never silently a tie.
    """
    reply = None
    last_exc: Exception | None = None
    for attempt in range(max_retries):
        try:
            reply = judge.verdict(pair.prompt, pair.response_a, pair.response_b)
            break
        except JudgeProtocolError:
            raise
        except Exception as exc:  # transport-level failure
            last_exc = exc
            if attempt + 1 < max_retries:
                sleep(backoff * (2**attempt))
    if reply is None:
        raise RuntimeError(f"judge unreachable after {max_retries} attempts: {last_exc}")
    verdict = reply.strip()
    if verdict not in CHOICES:
        raise JudgeProtocolError(f"unparseable judge reply {reply!r} for pair {pair.pair_id}")
    return Judgment(pair.pair_id, verdict, "model", judge.name)


@dataclass
class WinMatrix:
    models: list[str]
    wins: dict[tuple[str, str], int]  # ordered pair -> wins of first over second
    ties: dict[tuple[str, str], int]  # unordered, keyed by sorted pair
    judgment_count: int
    won_both: dict[str, int]
    lost_both: dict[str, int]

    def wins_of(self, x: str, y: str) -> int:
        return self.wins.get((x, y), 0)

    def losses_of(self, x: str, y: str) -> int:
        return self.wins.get((y, x), 0)

    def ties_of(self, x: str, y: str) -> int:
        return self.ties.get(tuple(sorted((x, y))), 0)

    def as_dict(self) -> dict:
        pair_rows = []
        for x, y in itertools.combinations(self.models, 2):
            pair_rows.append(
                {
                    "model_a": x,
                    "model_b": y,
                    "a_wins": self.wins_of(x, y),
                    "b_wins": self.wins_of(y, x),
                    "ties": self.ties_of(x, y),
                }
            )
        return {
            "models": self.models,
            "pairs": pair_rows,
            "judgment_count": self.judgment_count,
            "won_both": self.won_both,
            "lost_both": self.lost_both,
        }


def aggregate(
    judgments: list[Judgment],
    pairs: list[PreferencePair],
    focal: str | None = None,
) -> WinMatrix:
    """Unblind and tally. won_both counts prompts where the focal model's
    response beat every baseline it was paired with (majority per pair when
    several judgments exist); lost_both is the symmetric count.
    """
    by_id = {p.pair_id: p for p in pairs}
    for j in judgments:
        if j.pair_id not in by_id:
            raise PreferenceError(f"judgment references unknown pair {j.pair_id!r}")
    models = sorted({p.model_a for p in pairs} | {p.model_b for p in pairs})
    wins: dict[tuple[str, str], int] = {}
    ties: dict[tuple[str, str], int] = {}
    # per-pair vote balance for the won-both statistic
    votes: dict[str, dict[str, int]] = {}
    for j in judgments:
        p = by_id[j.pair_id]
        v = votes.setdefault(j.pair_id, {p.model_a: 0, p.model_b: 0})
        if j.choice == "A":
            wins[(p.model_a, p.model_b)] = wins.get((p.model_a, p.model_b), 0) + 1
            v[p.model_a] += 1
        elif j.choice == "B":
            wins[(p.model_b, p.model_a)] = wins.get((p.model_b, p.model_a), 0) + 1
            v[p.model_b] += 1
        else:
            key = tuple(sorted((p.model_a, p.model_b)))
            ties[key] = ties.get(key, 0) + 1
    focal_models = [focal] if focal is not None else models
    won_both: dict[str, int] = {}
    lost_both: dict[str, int] = {}
    for m in focal_models:
        if m not in models:
            raise PreferenceError(f"focal model {m!r} has no pairs")
        outcomes: dict[str, dict[str, str]] = {}
        for pid, v in votes.items():
            p = by_id[pid]
            if m not in (p.model_a, p.model_b):
                continue
            other = p.model_b if p.model_a == m else p.model_a
            if v[m] > v[other]:
                result = "win"
            elif v[m] < v[other]:
                result = "loss"
            else:
                result = "tie"
            outcomes.setdefault(p.prompt, {})[other] = result
        n_baselines = len(models) - 1
        won_both[m] = sum(
            1
            for per_prompt in outcomes.values()
            if len(per_prompt) == n_baselines and all(r == "win" for r in per_prompt.values())
        )
        lost_both[m] = sum(
            1
            for per_prompt in outcomes.values()
            if len(per_prompt) == n_baselines and all(r == "loss" for r in per_prompt.values())
        )
    return WinMatrix(
        models=models,
        wins=wins,
        ties=ties,
        judgment_count=len(judgments),
        won_both=won_both,
        lost_both=lost_both,
    )


def save_pairs(pairs: list[PreferencePair], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.as_record(), ensure_ascii=False) + "\n")


def load_pairs(path: str) -> list[PreferencePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                pairs.append(PreferencePair(**json.loads(line)))
    return pairs


def append_judgment(judgment: Judgment, path: str) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(judgment.as_record(), ensure_ascii=False) + "\n")
        fh.flush()


def load_judgments(path: str) -> list[Judgment]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Judgment(**json.loads(line)))
    return out
