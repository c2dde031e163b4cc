"""Nonhomogeneous Markov pure jump processes: transition functions,
simulation, explosion criteria and drift certificates."""

from .errors import (ConfigurationError, ModelError, ModelFileError, NumericsError,
                     PureJumpError, TruncationLeakError, UnsupportedSpaceError)
from .model import (DELTA, BirthDeathModel, DriftFunction, FunctionModel, JumpModel,
                    MatrixModel, Modulation, RateLaw, SetSequence, StateSpace,
                    build_birth_death, drift_function, flip_flop, geometric_birth,
                    prefix_sets, validate_c_drift, validate_q_function, yule, zero_rate)

__version__ = "0.1.0"
