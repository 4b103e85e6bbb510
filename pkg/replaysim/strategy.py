from typing import Callable, Dict

from replaysim.errors import ConfigError

# =========================================================
# REHEARSAL STRATEGIES
# =========================================================
# Each preset returns {"strategy": label, "section.key": value, ...}; the
# config loader applies the keys on top of the file.

def guide() -> Dict:
    return {
        "strategy": "GUIDE",
        "rehearsal.replay": "true",
        "guidance.variant": "GUIDE",
    }


def dgr_diffusion() -> Dict:
    return {
        "strategy": "DGR diffusion",
        "rehearsal.replay": "true",
        "guidance.variant": "NONE",
    }


def fine_tuning() -> Dict:
    return {
        "strategy": "Fine-tuning",
        "rehearsal.replay": "false",
        "guidance.variant": "NONE",
    }


def static_replay() -> Dict:
    # guidance variant stays as configured
    return {
        "strategy": "Static replay",
        "rehearsal.replay": "true",
        "rehearsal.interval": "inf",
    }


# =========================================================
# GUIDANCE ABLATIONS
# =========================================================

def prev_plus() -> Dict:
    return {
        "strategy": "Previous classifier (+)",
        "rehearsal.replay": "true",
        "guidance.variant": "PREV_PLUS",
    }


def prev_minus() -> Dict:
    return {
        "strategy": "Previous classifier (-)",
        "rehearsal.replay": "true",
        "guidance.variant": "PREV_MINUS",
    }


def curr_minus() -> Dict:
    return {
        "strategy": "Current classifier (-)",
        "rehearsal.replay": "true",
        "guidance.variant": "CURR_MINUS",
    }


STRATEGIES: Dict[str, Callable[[], Dict]] = {
    "guide": guide,
    "dgr_diffusion": dgr_diffusion,
    "fine_tuning": fine_tuning,
    "static_replay": static_replay,
    "prev_plus": prev_plus,
    "prev_minus": prev_minus,
    "curr_minus": curr_minus,
}


def strategy_overrides(method: str) -> Dict:
    """Overrides for ``method`` (without the ``strategy`` label)."""
    try:
        preset = STRATEGIES[method.strip().lower()]()
    except KeyError:
        raise ConfigError(
            f"unknown method {method!r}; choose from {', '.join(sorted(STRATEGIES))}", "experiment.method"
        ) from None
    return {k: v for k, v in preset.items() if k != "strategy"}


def strategy_label(method: str) -> str:
    if not method:
        return "custom"
    try:
        return STRATEGIES[method.strip().lower()]()["strategy"]
    except KeyError:
        raise ConfigError(f"unknown method {method!r}", "experiment.method") from None


# =========================================================
# DUAL-GUIDANCE PRESETS
# =========================================================

def dual_preset(name: str, s1: float, s2: float) -> Dict:
    """Scales for the dual-guidance demo: ``both`` guides to both classes at 10, ``reference`` drops c2."""
    name = name.strip().lower()
    if name == "both":
        return {"preset": "both", "s1": 10.0, "s2": 10.0}
    if name == "reference":
        return {"preset": "reference", "s1": s1, "s2": 0.0}
    if name == "custom":
        return {"preset": "custom", "s1": s1, "s2": s2}
    raise ConfigError(f"unknown dual preset {name!r}; choose from both, reference, custom", "dual.preset")
