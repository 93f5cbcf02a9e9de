"""Flow phase labels shared by the phantom, recomposition and reports."""

from enum import IntEnum


class Phase(IntEnum):
    """Label codes used in label images; 0 is outside the vessel mask."""

    BACKGROUND = 0
    ARTERIAL = 1
    NIDAL = 2
    VENOUS = 3
    UNASSIGNED = 4

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "Phase":
        return cls[key.upper()]


# temporal order of labels for p components
PHASE_SEQUENCE = {
    2: (Phase.ARTERIAL, Phase.VENOUS),
    3: (Phase.ARTERIAL, Phase.NIDAL, Phase.VENOUS),
}

# display colours, RGB in [0, 1]
PALETTE = {
    Phase.ARTERIAL: (1.0, 0.0, 0.0),
    Phase.NIDAL: (0.0, 1.0, 0.0),
    Phase.VENOUS: (0.0, 0.0, 1.0),
}
