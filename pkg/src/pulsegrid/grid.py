"""Mapping between heart rate in bpm and class labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HR_MIN = 40.0
HR_MAX = 125.0
N_CLASSES = 128


@dataclass(frozen=True)
class ClassGrid:
    hr_min: float = HR_MIN
    hr_max: float = HR_MAX
    n_classes: int = N_CLASSES

    @property
    def step(self) -> float:
        return (self.hr_max - self.hr_min) / self.n_classes

    def label_of(self, hr):
        """Segment index of ``hr`` (scalar or array); the top edge joins the last class."""
        hr = np.asarray(hr, dtype=np.float64)
        if np.any((hr < self.hr_min) | (hr > self.hr_max)):
            raise ValueError(f"HR outside admissible range [{self.hr_min}, {self.hr_max}]")
        lab = np.minimum(np.floor((hr - self.hr_min) / self.step), self.n_classes - 1).astype(np.int64)
        return int(lab) if lab.ndim == 0 else lab

    def hr_of(self, label):
        """Class center in bpm."""
        label = np.asarray(label)
        hr = self.hr_min + (label + 0.5) * self.step
        return float(hr) if hr.ndim == 0 else hr


GRID = ClassGrid()
