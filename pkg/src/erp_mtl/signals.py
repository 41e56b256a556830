"""Names and kinds of the eleven per-word signals."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SignalDescriptor:
    name: str
    kind: str  # "erp", "eye" or "reading"
    window_ms: tuple[int, int] | None = None

    @property
    def is_duration(self) -> bool:
        return self.kind in ("eye", "reading")


SIGNALS: dict[str, SignalDescriptor] = {
    d.name: d
    for d in (
        SignalDescriptor("ELAN", "erp", (125, 175)),
        SignalDescriptor("LAN", "erp", (300, 400)),
        SignalDescriptor("N400", "erp", (300, 500)),
        SignalDescriptor("EPNP", "erp", (400, 600)),
        SignalDescriptor("P600", "erp", (500, 700)),
        SignalDescriptor("PNP", "erp", (600, 700)),
        # first-fixation, first-pass (gaze duration), go-past, right-bounded
        SignalDescriptor("FIX", "eye"),
        SignalDescriptor("PASS", "eye"),
        SignalDescriptor("GO", "eye"),
        SignalDescriptor("RIGHT", "eye"),
        SignalDescriptor("READ", "reading"),
    )
}

ALL_SIGNALS: tuple[str, ...] = tuple(SIGNALS)
ERP_SIGNALS: tuple[str, ...] = tuple(n for n, d in SIGNALS.items() if d.kind == "erp")
EYE_SIGNALS: tuple[str, ...] = tuple(n for n, d in SIGNALS.items() if d.kind == "eye")


class UnknownSignalError(KeyError):
    pass


def descriptor(name: str) -> SignalDescriptor:
    try:
        return SIGNALS[name]
    except KeyError:
        raise UnknownSignalError(f"unknown signal {name!r}; expected one of {', '.join(ALL_SIGNALS)}") from None


def canonical_order(names) -> tuple[str, ...]:
    """Sort signal names into the fixed registry order, validating each."""
    names = set(names)
    for n in names:
        descriptor(n)
    return tuple(n for n in ALL_SIGNALS if n in names)
