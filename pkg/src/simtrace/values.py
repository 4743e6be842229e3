"""Tagged values exchanged between controller and simulator.

A Value is the unit payload of the wire protocol: sampled draws, observed
data and run results are all Values. Tensors are dense float64, row-major.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np


class ValueTag(enum.IntEnum):
    F64 = 1
    I64 = 2
    BOOL = 3
    STRING = 4
    TENSOR = 5


@dataclass(frozen=True)
class TensorValue:
    shape: tuple[int, ...]
    data: np.ndarray  # flat, float64, length == prod(shape)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        n = 1
        for d in self.shape:
            n *= d
        if arr.size != n:
            raise ValueError(
                f"tensor data length {arr.size} != product of shape {self.shape}"
            )

    def reshaped(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, TensorValue):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))


Payload = Union[float, int, bool, str, TensorValue]


@dataclass(frozen=True)
class Value:
    tag: ValueTag
    payload: Payload

    @staticmethod
    def f64(x: float) -> "Value":
        return Value(ValueTag.F64, float(x))

    @staticmethod
    def i64(x: int) -> "Value":
        return Value(ValueTag.I64, int(x))

    @staticmethod
    def boolean(x: bool) -> "Value":
        return Value(ValueTag.BOOL, bool(x))

    @staticmethod
    def string(x: str) -> "Value":
        return Value(ValueTag.STRING, str(x))

    @staticmethod
    def tensor(array, shape=None) -> "Value":
        arr = np.asarray(array, dtype=np.float64)
        if shape is None:
            shape = arr.shape
        return Value(ValueTag.TENSOR, TensorValue(tuple(shape), arr.reshape(-1)))

    def as_float(self) -> float:
        if self.tag == ValueTag.F64:
            return float(self.payload)
        if self.tag == ValueTag.I64:
            return float(self.payload)
        if self.tag == ValueTag.BOOL:
            return 1.0 if self.payload else 0.0
        raise TypeError(f"value of tag {self.tag.name} is not scalar")

    def as_int(self) -> int:
        if self.tag == ValueTag.I64:
            return int(self.payload)
        if self.tag == ValueTag.BOOL:
            return int(bool(self.payload))
        raise TypeError(f"value of tag {self.tag.name} is not an integer")

    def as_array(self) -> np.ndarray:
        if self.tag == ValueTag.TENSOR:
            return self.payload.reshaped()
        if self.tag in (ValueTag.F64, ValueTag.I64):
            return np.asarray(float(self.payload))
        raise TypeError(f"value of tag {self.tag.name} is not numeric")

    def numeric(self) -> np.ndarray:
        """Flat float64 view used for scoring and embeddings."""
        if self.tag == ValueTag.TENSOR:
            return self.payload.data
        return np.asarray([self.as_float()])
