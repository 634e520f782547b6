"""Counting metrics, whole-video inference, and evaluation protocols.

OBO is the fraction of videos predicted within +-1 of the true count.
MAE is the count-relative absolute error, averaged over the N' videos
whose true count is at least 1; zero-count videos stay in OBO but are
excluded from MAE (the relative error is undefined there), and MAE
itself is NaN when no video qualifies.

Inference mirrors training's clip protocol: window the footage, turn
each window into periodic tokens, let the decoder answer the fixed
counting question, parse the bracketed reply, and reconcile per-clip
counts across boundaries. A reply that fails to parse contributes a
zero answer and is surfaced through the parse-failure rate rather than
retried, keeping the pipeline deterministic.
"""

import math
from dataclasses import dataclass

import numpy as np

from .protocol import (
    AnswerParseError,
    AnswerRangeError,
    ClipAnswer,
    decode_answer,
    decode_count_token_answer,
    reconcile_counts,
)
from .synthdata import (
    DEFAULT_CLIP_LEN,
    make_dataset,
    split_frames,
    split_into_clips,
)
from .training import answer_ids_for, instruction_ids_for

__all__ = [
    "EvalError",
    "ProtocolSpec",
    "VideoOutcome",
    "EvalResult",
    "obo",
    "mae",
    "choose_sample_interval",
    "count_clip",
    "count_video",
    "oracle_count",
    "evaluate",
    "run_protocol",
    "render_report",
    "read_report",
]

# Generated answers are at most 10 symbols plus EOS; a little slack lets
# a confused decoder show what it actually produced before parsing fails.
_MAX_ANSWER_TOKENS = 14

_PROFILES = ("family-a", "family-b")


class EvalError(ValueError):
    """Metric preconditions violated (empty or mismatched inputs)."""


@dataclass(frozen=True)
class ProtocolSpec:
    """Which generator families feed training vs. testing.

    split_seed drives the held-out dataset draw; callers keep it distinct
    from the training-data seed so the two sets never share videos.
    """

    train_profile: str
    test_profile: str
    split_seed: int = 1

    def __post_init__(self):
        for field_name in ("train_profile", "test_profile"):
            value = getattr(self, field_name)
            if value not in _PROFILES:
                raise EvalError(f"{field_name} {value!r} not one of {_PROFILES}")

    @property
    def kind(self) -> str:
        return "in-domain" if self.train_profile == self.test_profile else "cross"


@dataclass(frozen=True)
class VideoOutcome:
    video_id: int
    gt: int
    pred: int
    parse_failures: int


@dataclass(frozen=True)
class EvalResult:
    rows: tuple
    obo: float
    mae: float  # NaN when no video has a nonzero true count
    n: int
    n_mae: int
    parse_fail_rate: float


def obo(gts, preds) -> float:
    """Fraction of videos with |prediction - truth| <= 1."""
    if len(gts) == 0:
        raise EvalError("obo needs at least one video")
    if len(gts) != len(preds):
        raise EvalError(f"obo got {len(gts)} truths but {len(preds)} predictions")
    hits = sum(1 for g, p in zip(gts, preds) if abs(g - p) <= 1)
    return hits / len(gts)


def mae(gts, preds) -> float:
    """Mean |truth - prediction| / truth over videos with truth >= 1.

    Returns NaN when every truth is zero; those videos cannot contribute
    a relative error.
    """
    if len(gts) == 0:
        raise EvalError("mae needs at least one video")
    if len(gts) != len(preds):
        raise EvalError(f"mae got {len(gts)} truths but {len(preds)} predictions")
    errs = [abs(g - p) / g for g, p in zip(gts, preds) if g >= 1]
    if not errs:
        return math.nan
    return sum(errs) / len(errs)


def choose_sample_interval(n_frames: int, clip_len: int = DEFAULT_CLIP_LEN, max_clips: int = 8) -> int:
    """Smallest interval keeping the video within max_clips windows.

    Videos of clip_len frames or fewer always get interval 1; longer
    footage is thinned just enough that every window still spans clip_len
    subsampled frames.
    """
    if n_frames < 1:
        raise EvalError("cannot choose an interval for an empty video")
    return max(1, -(-n_frames // (clip_len * max_clips)))


def count_clip(pipeline, clip_frames):
    """Answer the counting question for one window.

    Returns (ClipAnswer, raw generated text, parsed flag); a reply the
    protocol cannot parse maps to the zero answer.
    """
    p_tokens = pipeline.periodic_tokens(clip_frames)
    instr = instruction_ids_for(
        pipeline.vocab, 0, include_description=pipeline.config.include_description
    )
    text, _ = pipeline.lm.generate(p_tokens, instr, max_len=_MAX_ANSWER_TOKENS)
    decode = (
        decode_count_token_answer if pipeline.config.count_token_answers else decode_answer
    )
    try:
        return decode(text), text, True
    except (AnswerParseError, AnswerRangeError):
        return ClipAnswer(0, 0, 0), text, False


def count_video(pipeline, frames, sample_interval=None):
    """Predict the repetition count of a full video.

    Returns (count, diagnostics) where diagnostics is a dict with the
    per-clip answers, the raw generated texts, the interval used, and the
    number of clips whose reply failed to parse.
    """
    if sample_interval is None:
        sample_interval = choose_sample_interval(frames.shape[0])
    answers, texts, failures = [], [], 0
    for window in split_frames(frames, DEFAULT_CLIP_LEN, sample_interval):
        answer, text, parsed = count_clip(pipeline, window)
        answers.append(answer)
        texts.append(text)
        if not parsed:
            failures += 1
    diagnostics = {
        "answers": answers,
        "texts": texts,
        "sample_interval": sample_interval,
        "parse_failures": failures,
    }
    return reconcile_counts(answers), diagnostics


def oracle_count(video, annotation, clip_len: int = DEFAULT_CLIP_LEN, sample_interval: int = 1) -> int:
    """Ground-truth-labeled split and reconcile, no model involved.

    Isolates the windowing/reconciliation protocol: the result must equal
    the annotation's count for every synthetic video.
    """
    clips = split_into_clips(video, annotation, clip_len, sample_interval)
    return reconcile_counts([label for _, label in clips])


def evaluate(pipeline, dataset, oracle: bool = False) -> EvalResult:
    """Score a model (or the oracle protocol) on (video, annotation) pairs."""
    if not dataset:
        raise EvalError("evaluate needs a non-empty dataset")
    rows = []
    for video_id, (video, annotation) in enumerate(dataset):
        if oracle:
            pred, failures = oracle_count(video, annotation), 0
        else:
            pred, diag = count_video(pipeline, video.frames)
            failures = diag["parse_failures"]
        rows.append(VideoOutcome(video_id, annotation.count, pred, failures))
    gts = [r.gt for r in rows]
    preds = [r.pred for r in rows]
    n_mae = sum(1 for g in gts if g >= 1)
    total_clips = 0
    for video, _ in dataset:
        s = 1 if oracle else choose_sample_interval(video.frames.shape[0])
        total_clips += len(split_frames(video.frames, DEFAULT_CLIP_LEN, s))
    fail_rate = sum(r.parse_failures for r in rows) / total_clips
    return EvalResult(
        rows=tuple(rows),
        obo=obo(gts, preds),
        mae=mae(gts, preds),
        n=len(rows),
        n_mae=n_mae,
        parse_fail_rate=fail_rate,
    )


def run_protocol(
    pipeline,
    spec: ProtocolSpec,
    n_videos: int,
    oracle: bool = False,
    report_path=None,
    config_digest: str = "unset",
    aperiodic_fraction: float = 0.1,
) -> EvalResult:
    """Evaluate on a freshly drawn held-out set of spec.test_profile."""
    if n_videos < 1:
        raise EvalError("run_protocol needs n_videos >= 1")
    dataset = make_dataset(n_videos, spec.test_profile, seed=spec.split_seed,
                           aperiodic_fraction=aperiodic_fraction)
    result = evaluate(pipeline, dataset, oracle=oracle)
    if report_path is not None:
        text = render_report(result, spec, config_digest)
        with open(report_path, "w", encoding="ascii") as fh:
            fh.write(text)
    return result


def _fmt_mae(value: float) -> str:
    return "undefined" if math.isnan(value) else f"{value:.6f}"


def render_report(result: EvalResult, spec: ProtocolSpec, config_digest: str = "unset") -> str:
    lines = [
        "# periocount evaluation report",
        f"config_digest={config_digest}",
        f"protocol={spec.kind} train_profile={spec.train_profile} "
        f"test_profile={spec.test_profile} split_seed={spec.split_seed}",
        "video_id gt pred parse_failures",
    ]
    for r in result.rows:
        lines.append(f"{r.video_id} {r.gt} {r.pred} {r.parse_failures}")
    lines.append(
        f"OBO={result.obo:.6f} MAE={_fmt_mae(result.mae)} N={result.n} "
        f"N_mae={result.n_mae} parse_fail_rate={result.parse_fail_rate:.6f}"
    )
    return "\n".join(lines) + "\n"


def read_report(text: str):
    """Parse a rendered report back into (EvalResult, header dict).

    The footer's aggregates are recomputed from the rows where possible
    and must agree, so a truncated or edited report is rejected.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 4 or not lines[0].startswith("#"):
        raise EvalError("not a recognizable evaluation report")
    header = {}
    for part in lines[1].split() + lines[2].split():
        if "=" in part:
            key, _, value = part.partition("=")
            header[key] = value
    if lines[3].split() != ["video_id", "gt", "pred", "parse_failures"]:
        raise EvalError("missing column header line")
    rows = []
    for ln in lines[4:-1]:
        vid, gt, pred, failures = (int(v) for v in ln.split())
        rows.append(VideoOutcome(vid, gt, pred, failures))
    footer = {}
    for part in lines[-1].split():
        key, _, value = part.partition("=")
        footer[key] = value
    if not rows:
        raise EvalError("report carries no per-video rows")
    gts = [r.gt for r in rows]
    preds = [r.pred for r in rows]
    recomputed_obo = obo(gts, preds)
    recomputed_mae = mae(gts, preds)
    stated_mae = math.nan if footer["MAE"] == "undefined" else float(footer["MAE"])
    if abs(recomputed_obo - float(footer["OBO"])) > 5e-7 or int(footer["N"]) != len(rows):
        raise EvalError("report footer disagrees with its rows")
    if not (math.isnan(stated_mae) and math.isnan(recomputed_mae)):
        if math.isnan(stated_mae) != math.isnan(recomputed_mae) or abs(
            recomputed_mae - stated_mae
        ) > 5e-7:
            raise EvalError("report footer disagrees with its rows")
    result = EvalResult(
        rows=tuple(rows),
        obo=recomputed_obo,
        mae=recomputed_mae,
        n=len(rows),
        n_mae=sum(1 for g in gts if g >= 1),
        parse_fail_rate=float(footer["parse_fail_rate"]),
    )
    return result, header
