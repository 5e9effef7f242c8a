"""Exception types shared across the package.

The command-line layer maps these onto exit codes, so library code should
raise the most specific type that applies rather than bare ValueError.
"""


class Jm3dError(Exception):
    """Base class for all package errors."""


class ShapeError(Jm3dError):
    """Array shapes are incompatible with an operation's contract."""


class ContractError(Jm3dError):
    """A documented precondition was violated by the caller."""


class NumericError(Jm3dError):
    """A computation produced NaN/Inf or exceeded a numeric tolerance."""


class InputError(Jm3dError):
    """An input value (text, payload, cloud) is empty or unusable."""


class ConfigError(Jm3dError):
    """A configuration value is out of its allowed range."""


class SamplingError(Jm3dError):
    """No view selection satisfies the requested angular window."""


class LabelError(Jm3dError):
    """A category label does not resolve against the category tree."""


class ManifestError(Jm3dError):
    """A dataset manifest failed validation.

    ``violations`` lists every offending record, not just the first.
    """

    def __init__(self, violations):
        self.violations = [str(v) for v in violations]
        super().__init__(f"manifest validation failed with {len(self.violations)} problem(s)")

    def __str__(self):
        return super().__str__() + "".join(f"\n  - {v}" for v in self.violations)
