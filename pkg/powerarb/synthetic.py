"""Synthetic quarter-hour market generator.

Stands in for the historical balancing-market dataset. Output has the same
schema as ``load_market_table`` and is a pure function of the config.
"""

import logging

import numpy as np
import pandas as pd
from dateutil.parser import isoparse

from .config import SynthConfig
from .errors import InvalidConfig
from .market_data import MarketTable, RegulationState, Resolution

logger = logging.getLogger(__name__)

QUARTERS_PER_DAY = 96
# Surplus, Shortage, Balanced in chain index order.
_STATES = [RegulationState.SURPLUS, RegulationState.SHORTAGE, RegulationState.BALANCED]


def _validate(config: SynthConfig) -> None:
    if config.days < 1:
        raise InvalidConfig("days must be >= 1", key="synth.days")
    for key in ("shortage_base_prob", "balanced_prob"):
        value = getattr(config, key)
        if not 0.0 <= value <= 1.0:
            raise InvalidConfig(f"{key} must lie in [0, 1]", key=f"synth.{key}")
    if config.shortage_base_prob + config.balanced_prob > 1.0 + 1e-12:
        raise InvalidConfig(
            "shortage_base_prob + balanced_prob must not exceed 1",
            key="synth.balanced_prob",
        )
    if not 0.0 <= config.persistence < 1.0:
        raise InvalidConfig("persistence must lie in [0, 1)", key="synth.persistence")
    if not config.price_regimes:
        raise InvalidConfig("at least one price regime required", key="synth.price_regimes")
    for regime in config.price_regimes:
        if regime.weight <= 0 or regime.da_std < 0:
            raise InvalidConfig(
                "regime weights must be > 0 and stddevs >= 0", key="synth.price_regimes"
            )
    if config.bm_spread_mean < 0 or config.surplus_bid_std < 0 or config.shortage_ask_std < 0:
        raise InvalidConfig("BM spread and stddevs must be >= 0", key="synth")


def _regulation_chain(rng: np.random.Generator, n: int, config: SynthConfig) -> np.ndarray:
    """Persistent Markov chain whose stationary mix is the configured base mix."""
    shortage = config.shortage_base_prob
    balanced = config.balanced_prob
    probs = np.array([max(0.0, 1.0 - shortage - balanced), shortage, balanced])
    probs = probs / probs.sum()
    fresh = rng.choice(3, size=n, p=probs)
    keep = rng.random(n) < config.persistence
    keep[0] = False
    last_fresh = np.maximum.accumulate(np.where(keep, 0, np.arange(n)))
    return fresh[last_fresh]


def generate_synthetic_market(config: SynthConfig) -> MarketTable:
    """Generate a deterministic synthetic market table from ``config``."""
    _validate(config)
    rng = np.random.default_rng(config.seed)
    days = config.days
    n = days * QUARTERS_PER_DAY

    start = pd.Timestamp(isoparse(config.start))
    start = start.tz_localize("UTC") if start.tzinfo is None else start.tz_convert("UTC")
    start = start.normalize()
    timestamps = pd.date_range(start, periods=n, freq="15min")

    states = _regulation_chain(rng, n, config)
    code = np.array([s.code for s in _STATES], dtype=np.float64)[states]

    hour = np.asarray(timestamps.hour, dtype=np.float64) + np.asarray(
        timestamps.minute, dtype=np.float64
    ) / 60.0
    day_of_year = np.asarray(timestamps.dayofyear, dtype=np.float64)
    weekend = np.asarray(timestamps.dayofweek >= 5, dtype=np.float64)
    diurnal = np.sin((hour - 6.0) / 24.0 * 2.0 * np.pi)
    seasonal = np.cos((day_of_year - 15.0) / 365.25 * 2.0 * np.pi)

    # Day-ahead price: daily regime, hourly noise, repeated over quarters.
    weights = np.array([r.weight for r in config.price_regimes], dtype=np.float64)
    regime_of_day = rng.choice(len(weights), size=days, p=weights / weights.sum())
    means = np.array([r.da_mean for r in config.price_regimes])[regime_of_day]
    stds = np.array([r.da_std for r in config.price_regimes])[regime_of_day]
    hourly_noise = rng.standard_normal(days * 24)
    hourly_shape = np.sin((np.arange(days * 24) % 24 - 6.0) / 24.0 * 2.0 * np.pi)
    hourly_price = np.repeat(means, 24) + np.repeat(stds, 24) * (
        0.8 * hourly_shape + 0.6 * hourly_noise
    )
    da_price = np.repeat(hourly_price, 4)

    def noise(scale: float) -> np.ndarray:
        return scale * rng.standard_normal(n)

    shift = config.signal_strength * code
    load_forecast = 12000 + 2500 * diurnal - 900 * weekend + 600 * seasonal + 400 * shift + noise(300)
    wind_forecast = np.clip(3000 + 1200 * seasonal - 900 * shift + noise(700), 0, None)
    solar_forecast = np.clip(
        2500 * np.clip(diurnal, 0, None) * (1 - 0.4 * seasonal) - 500 * shift + noise(150), 0, None
    )
    ntc_forecast = 4000 - 400 * shift + noise(250)
    cross_border_flow = 0.6 * ntc_forecast * np.tanh(shift + noise(0.5))
    actual_load = load_forecast + noise(250)
    actual_ntc = ntc_forecast + noise(150)
    gen_wind_onshore = np.clip(0.65 * wind_forecast + noise(250), 0, None)
    gen_wind_offshore = np.clip(0.35 * wind_forecast + noise(150), 0, None)
    gen_solar = np.clip(solar_forecast + noise(120), 0, None)
    gen_biomass = 400 + noise(30)
    gen_nuclear = 480 + noise(10)
    gen_waste = 250 + noise(20)
    residual_load = actual_load - gen_wind_onshore - gen_wind_offshore - gen_solar
    gen_gas = np.clip(residual_load - gen_biomass - gen_nuclear - gen_waste + noise(200), 0, None)

    spread = rng.exponential(config.bm_spread_mean, size=n) if config.bm_spread_mean > 0 else np.zeros(n)
    surplus_bid = config.surplus_bid_mean + noise(config.surplus_bid_std)
    shortage_ask = config.shortage_ask_mean + noise(config.shortage_ask_std)
    balanced_mid = da_price + noise(10.0)
    bid = np.select(
        [states == 0, states == 1], [surplus_bid, shortage_ask - spread], balanced_mid - spread / 2
    )
    ask = np.select(
        [states == 0, states == 1], [surplus_bid + spread, shortage_ask], balanced_mid + spread / 2
    )

    frame = pd.DataFrame(
        {
            "timestamp": timestamps,
            "da_price": da_price,
            "bm_bid_clearing": bid,
            "bm_ask_clearing": ask,
            "regulation_state": [_STATES[s].value for s in states],
            "load_forecast_mw": load_forecast,
            "wind_forecast_mw": wind_forecast,
            "solar_forecast_mw": solar_forecast,
            "ntc_forecast_mw": ntc_forecast,
            "cross_border_flow_mw": cross_border_flow,
            "actual_load_mw": actual_load,
            "actual_ntc_mw": actual_ntc,
            "gen_biomass_mw": gen_biomass,
            "gen_gas_mw": gen_gas,
            "gen_nuclear_mw": gen_nuclear,
            "gen_solar_mw": gen_solar,
            "gen_waste_mw": gen_waste,
            "gen_wind_offshore_mw": gen_wind_offshore,
            "gen_wind_onshore_mw": gen_wind_onshore,
            "residual_load_mw": residual_load,
        }
    )
    numeric = frame.columns.drop(["timestamp", "regulation_state"])
    # Rounded so the serialized form is stable across platforms.
    frame[numeric] = frame[numeric].round(4)
    # Rounding must not cross the clearing prices.
    frame["bm_ask_clearing"] = np.maximum(frame["bm_ask_clearing"], frame["bm_bid_clearing"])

    logger.info(
        f"Synthesized {days} days ({n} intervals), seed {config.seed}, "
        f"shortage share {float(np.mean(states == 1)):.3f}"
    )
    return MarketTable(frame, Resolution.QUARTER_HOURLY)
