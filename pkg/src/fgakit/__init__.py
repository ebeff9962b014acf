"""Feature-guidance adversarial attacks on small image/text encoders."""

from .errors import (AttackError, ConfigError, ConstructionError, DimensionError, FGAError,
                     FormatError, MissingFileError, NumericError, TrainingError, VersionError)

__version__ = "0.1.0"
