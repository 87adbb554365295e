"""Flat ``key = value`` configuration files (see docs/FORMATS.md).

Blank lines and lines starting with ``#`` are ignored. Keys are unique.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Dict, Optional, Tuple

from .errors import ContractError


def parse_config(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ContractError(f"line {lineno}: empty key")
        if key in out:
            raise ContractError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_mix(text: str) -> Tuple[float, float, float]:
    """``"G,P,K"`` weights, normalised to ratios that sum to 1."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ContractError(f"task mix needs three comma-separated weights, got {text!r}")
    try:
        w = [Fraction(p) for p in parts]
    except ValueError as exc:
        raise ContractError(f"bad task mix {text!r}") from exc
    if any(x < 0 for x in w) or sum(w) == 0:
        raise ContractError(f"task mix weights must be nonnegative with a positive sum, got {text!r}")
    total = sum(w)
    return tuple(float(x / total) for x in w)


def parse_ints(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ContractError(f"expected comma-separated integers, got {text!r}") from exc


@dataclass
class TrainPlan:
    """Settings for ``mtmanip train``."""

    n: int = 2000
    task_mix: Tuple[float, float, float] = (0.5, 0.5, 0.0)
    seed: int = 0
    iterations: int = 3000
    batch_size: int = 32
    width_scale: Fraction = Fraction(1, 4)
    lr_step: int = 1500
    eval_size: int = 500
    balanced: bool = True
    poke_noise: float = 0.0
    data_dir: Optional[str] = None
    resume: Optional[str] = None
    checkpoint_every: int = 0
    log_every: int = 100

    @classmethod
    def from_text(cls, text: str, base: Optional[Path] = None) -> "TrainPlan":
        raw = parse_config(text)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ContractError(f"unknown plan keys: {', '.join(unknown)}")
        kw = {}
        try:
            for key, value in raw.items():
                if key == "task_mix":
                    kw[key] = parse_mix(value)
                elif key == "width_scale":
                    kw[key] = Fraction(value)
                elif key in ("balanced",):
                    if value.lower() not in ("true", "false", "1", "0"):
                        raise ContractError(f"{key} must be true or false, got {value!r}")
                    kw[key] = value.lower() in ("true", "1")
                elif key == "poke_noise":
                    kw[key] = float(value)
                elif key in ("data_dir", "resume"):
                    p = Path(value)
                    kw[key] = str(p if p.is_absolute() or base is None else base / p) if value else None
                else:
                    kw[key] = int(value)
        except ValueError as exc:
            raise ContractError(f"bad value in plan: {exc}") from exc
        plan = cls(**kw)
        if plan.n <= 0 or plan.iterations < 0 or plan.batch_size <= 0 or plan.width_scale <= 0:
            raise ContractError("n, batch_size and width_scale must be positive, iterations nonnegative")
        return plan

    @classmethod
    def load(cls, path) -> "TrainPlan":
        path = Path(path)
        return cls.from_text(path.read_text(), base=path.parent)
