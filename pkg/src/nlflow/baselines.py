"""Shipped baseline controller parameters for the three human-driver models.

Values are the calibrated constants from the driving-simulator study
(car-following, car-following with look-ahead speed, car-following with
nudging).  They are adopted verbatim as library constants; re-deriving them
requires the original raw recordings, which do not ship with the package.
"""

from .microsim import ControllerParams, VOptParams

__all__ = [
    "car_following_params",
    "look_ahead_params",
    "nudging_params",
    "baseline_params",
    "BASELINE_MODELS",
]


def car_following_params() -> ControllerParams:
    """Plain OVM/ACC human model (alpha_0, beta_0 only)."""
    return ControllerParams(
        alpha={0: 0.011},
        beta={0: 0.718},
        vopt=VOptParams(v_max=17.08, s_st=1.53, s_go=24.96),
    )


def look_ahead_params() -> ControllerParams:
    """Human model with look-ahead speed feedback from two further leaders."""
    return ControllerParams(
        alpha={0: 0.027},
        beta={0: 0.965, -1: 0.0500, -2: 0.0082},
        vopt=VOptParams(v_max=26.53, s_st=1.12, s_go=27.97),
        lookahead_count=2,
    )


def nudging_params() -> ControllerParams:
    """Human model nudged by its direct follower (indicator-gated)."""
    return ControllerParams(
        alpha={0: 0.014},
        beta={0: 0.789, 1: 0.092},
        vopt=VOptParams(v_max=16.24, s_st=1.00, s_go=21.40),
        lookbehind_count=1,
        nudging_indicator=True,
    )


BASELINE_MODELS = {
    "car_following": car_following_params,
    "look_ahead": look_ahead_params,
    "nudging": nudging_params,
}


def baseline_params(name: str) -> ControllerParams:
    try:
        return BASELINE_MODELS[name]()
    except KeyError:
        raise ValueError(
            f"unknown baseline model {name!r}; expected one of "
            f"{sorted(BASELINE_MODELS)}"
        ) from None
