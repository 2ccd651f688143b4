"""Binary class labels used throughout the pipeline."""

from enum import IntEnum


class Label(IntEnum):
    """Normal/abnormal verdict. Abnormal is the positive class in metrics."""

    NORMAL = 0
    ABNORMAL = 1

    @classmethod
    def from_name(cls, name: str) -> "Label":
        key = name.strip().lower()
        if key == "normal":
            return cls.NORMAL
        if key == "abnormal":
            return cls.ABNORMAL
        raise ValueError(f"unknown label name: {name!r}")

    @property
    def display(self) -> str:
        return "normal" if self is Label.NORMAL else "abnormal"
