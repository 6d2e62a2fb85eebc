# SPDX-License-Identifier: LGPL-3.0-or-later

from enum import IntEnum
from typing import Iterable, Tuple, Union


class _EnumBase(IntEnum):
    """Simple class to override default Enum __str__"""
    def __str__(self) -> str:
        return f"{self.name}"

    @classmethod
    def from_name(cls, name: str) -> "_EnumBase":
        """Look up a member by name, case-insensitive.

        Raises:
          UnexpectedTypeError: If no member has that name.
        """
        key = name.strip().lower().replace("-", "_")
        for member in cls:
            if member.name == key:
                return member
        raise UnexpectedTypeError(name, [m.name for m in cls])


class PerturbationMethod(_EnumBase):
    """How a 2-D weight is perturbed

    Attributes:
      mezo (int): Dense Gaussian perturbation of every entry.
      subzo (int): Z = U Σ V^T with lazily refreshed U, V.
      lozo (int): Z = U V^T with lazily refreshed V.
      tezo (int): Z = Σ_s τ_s (u_s ∘ v_s) with fixed u, v.
    """
    mezo = 1
    subzo = 2
    lozo = 3
    tezo = 4


class OptimizerVariant(_EnumBase):
    """Update rule applied to the estimated direction"""
    sgd = 0
    momentum = 1
    adam = 2


class RankCriterion(_EnumBase):
    """Rank criterion

    Attributes:
      largest (int): Count singular values above a fraction of σ_1.
      energy (int): Smallest k retaining a fraction of Σσ².
    """
    largest = 0
    energy = 1


class Activation(_EnumBase):
    identity = 0
    tanh = 1
    relu = 2


class RunStatus(_EnumBase):
    completed = 0
    converged = 1
    diverged = 2


class ShapeMismatchError(Exception):
    def __init__(self, got: Tuple[int, ...], expected: Tuple[int, ...]):
        self._got = tuple(got)
        self._expected = tuple(expected)

    @property
    def got(self) -> Tuple[int, ...]:
        return self._got

    @property
    def expected(self) -> Tuple[int, ...]:
        return self._expected

    def __str__(self) -> str:
        return f"shape {self.got} does not match expected {self.expected}"


class NonFiniteLossError(Exception):
    def __init__(self, f_plus: float, f_minus: float):
        self._f_plus = f_plus
        self._f_minus = f_minus

    @property
    def f_plus(self) -> float:
        return self._f_plus

    @property
    def f_minus(self) -> float:
        return self._f_minus

    def __str__(self) -> str:
        return (
            f"non-finite objective value, "
            f"f+ = {self.f_plus}, f- = {self.f_minus}"
        )


class ConfigError(Exception):
    def __init__(self, key: str, reason: str):
        self._key = key
        self._reason = reason

    @property
    def key(self) -> str:
        return self._key

    @property
    def reason(self) -> str:
        return self._reason

    def __str__(self) -> str:
        return f"invalid config key {self.key}: {self.reason}"


class CountOverflowError(Exception):
    def __init__(self, method: str, value: int):
        self._method = method
        self._value = value

    @property
    def method(self) -> str:
        return self._method

    @property
    def value(self) -> int:
        return self._value

    def __str__(self) -> str:
        return f"element count {self.value} for {self.method} overflows int64"


class UnexpectedTypeError(Exception):
    def __init__(
        self, got: Union[int, str], expected: Iterable[Union[int, str]]
    ):
        self._got = got
        self._expected = expected

    @property
    def got(self) -> Union[int, str]:
        return self._got

    @property
    def expected(self) -> Iterable[Union[int, str]]:
        return self._expected

    def __str__(self) -> str:
        estr = ", ".join([str(x) for x in self.expected])
        return f"unexpected type {self.got}, expected one of: {estr}"
