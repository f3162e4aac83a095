"""Exception hierarchy shared by every service.

Each class carries the process exit code the CLI maps it to:
1 numerical failure, 2 infeasible model, 64 usage error.
"""

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_INFEASIBLE = 2
EXIT_USAGE = 64


class PolicyLabError(Exception):
    exit_code = EXIT_NUMERICAL


# Input-shaped errors also subclass ValueError so `except ValueError` callers keep working.
class ConstructionError(PolicyLabError, ValueError):
    exit_code = EXIT_USAGE


class DimensionMismatch(PolicyLabError, ValueError):
    exit_code = EXIT_USAGE


class ParseError(PolicyLabError, ValueError):
    exit_code = EXIT_USAGE


class ValidationError(PolicyLabError, ValueError):
    exit_code = EXIT_USAGE


class ConfigError(PolicyLabError, ValueError):
    exit_code = EXIT_USAGE


class NumericalError(PolicyLabError):
    exit_code = EXIT_NUMERICAL


class TooLarge(PolicyLabError):
    exit_code = EXIT_NUMERICAL


class InfeasibleRhs(PolicyLabError):
    exit_code = EXIT_INFEASIBLE


class SubproblemInfeasible(PolicyLabError):
    exit_code = EXIT_INFEASIBLE


class SubproblemUnbounded(PolicyLabError):
    exit_code = EXIT_NUMERICAL


class MasterInfeasible(PolicyLabError):
    exit_code = EXIT_INFEASIBLE


class CmInfeasible(PolicyLabError):
    exit_code = EXIT_INFEASIBLE


class TrainingInfeasible(PolicyLabError):
    exit_code = EXIT_INFEASIBLE


class EmptyPolicy(PolicyLabError, ValueError):
    exit_code = EXIT_USAGE


class EmptyBundle(PolicyLabError, ValueError):
    exit_code = EXIT_USAGE
