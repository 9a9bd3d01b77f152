"""Error hierarchy with machine-readable codes."""

from typing import Any, Dict, Optional


class PowerArbError(ValueError):
    """Base class for all domain errors.

    Carries a stable ``code`` and an optional ``key`` naming the offending
    config key, column or path, so the CLI can emit a machine-readable record.
    """

    code = "powerarb_error"

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.key = key

    def to_record(self) -> Dict[str, Any]:
        """Return the error as a JSON-compatible record."""
        return {"code": self.code, "message": self.message, "key": self.key}


# market-data
class MissingColumn(PowerArbError):
    code = "missing_column"


class GapInTimestamps(PowerArbError):
    code = "gap_in_timestamps"

    def __init__(self, first_gap, message: Optional[str] = None):
        self.first_gap = first_gap
        super().__init__(
            message or f"Missing interval at {first_gap.isoformat()}",
            key=first_gap.isoformat(),
        )


class NonFiniteValue(PowerArbError):
    code = "non_finite_value"

    def __init__(self, row: int, column: str):
        self.row = row
        self.column = column
        super().__init__(f"Non-finite value at row {row}, column '{column}'", column)


class LagExceedsHistory(PowerArbError):
    code = "lag_exceeds_history"


class InsufficientHistory(PowerArbError):
    code = "insufficient_history"


class InvalidConfig(PowerArbError):
    code = "invalid_config"


class DegenerateLabels(PowerArbError):
    code = "degenerate_labels"


class NonFiniteFeature(PowerArbError):
    code = "non_finite_feature"


class DimensionMismatch(PowerArbError):
    code = "dimension_mismatch"


# market-env
class IncompleteHour(PowerArbError):
    code = "incomplete_hour"


class VolumeExceedsFeasibility(PowerArbError):
    code = "volume_exceeds_feasibility"


class InfeasiblePostTradePosition(PowerArbError):
    code = "infeasible_post_trade_position"


class WrongArity(PowerArbError):
    code = "wrong_arity"


class EmptyBaselines(PowerArbError):
    code = "empty_baselines"


class OutOfBoundsAction(PowerArbError):
    code = "out_of_bounds_action"


class DoubleDaStep(PowerArbError):
    code = "double_da_step"


class DaStepMissing(PowerArbError):
    code = "da_step_missing"


# policies
class PeriodOutOfRange(PowerArbError):
    code = "period_out_of_range"


# rl-core
class NonFiniteLoss(PowerArbError):
    code = "non_finite_loss"


class InsufficientReplay(PowerArbError):
    code = "insufficient_replay"


class ShapeMismatch(PowerArbError):
    code = "shape_mismatch"


# walkforward
class InsufficientYears(PowerArbError):
    code = "insufficient_years"


class CoverageGap(PowerArbError):
    code = "coverage_gap"


class MissingArtifact(PowerArbError):
    code = "missing_artifact"


class ChecksumMismatch(PowerArbError):
    code = "checksum_mismatch"


class UnorderedTimestamps(PowerArbError):
    code = "unordered_timestamps"


class InvalidMarketRecord(PowerArbError):
    code = "invalid_market_record"


class EpisodeFinished(PowerArbError):
    code = "episode_finished"


# cli
class InvariantViolation(PowerArbError):
    code = "invariant_violation"
