"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints
``category: message`` on stderr so failures can be parsed by scripts.
"""


class TripletSVError(Exception):
    category = "error"


class DimensionError(TripletSVError, ValueError):
    category = "dimension"


class DomainError(TripletSVError, ValueError):
    category = "domain"


class NumericError(TripletSVError, ArithmeticError):
    category = "numeric"


class ContractError(TripletSVError, ValueError):
    category = "contract"


class BatchSizeError(TripletSVError, ValueError):
    category = "batch-size"


class FeatureError(TripletSVError, ValueError):
    category = "feature"


class VadError(FeatureError):
    category = "vad"


class ContextError(TripletSVError, ValueError):
    category = "context"


class PoolingError(TripletSVError, ValueError):
    category = "pooling"


class CorpusError(TripletSVError, ValueError):
    category = "corpus"


class LookupFailure(TripletSVError, KeyError):
    category = "lookup"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NormalizationError(TripletSVError, ValueError):
    category = "normalization"


class PreconditionError(TripletSVError, ValueError):
    category = "precondition"


class FusionError(TripletSVError, ValueError):
    category = "fusion"


class MetricError(TripletSVError, ValueError):
    category = "metric"


class FormatError(TripletSVError, ValueError):
    category = "format"


class ConfigError(TripletSVError, ValueError):
    category = "config"


class MissingArtifactError(TripletSVError, FileNotFoundError):
    category = "missing-artifact"
