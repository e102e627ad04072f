"""Minimal EDF/EDF+ reader and writer (16-bit little-endian data records).

Header layout (ASCII, space padded)::

    fixed part, 256 bytes           per-signal part, ns x 256 bytes
    ------------------------------  ----------------------------------
      8  version                      16  label
     80  patient id                   80  transducer type
     80  recording id                  8  physical dimension
      8  start date dd.mm.yy           8  physical minimum
      8  start time hh.mm.ss           8  physical maximum
      8  header size in bytes          8  digital minimum
     44  reserved ("EDF+C"...)         8  digital maximum
      8  number of data records       80  prefiltering
      8  record duration (s)           8  samples per record
      4  number of signals            32  reserved
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyFileError, MalformedHeaderError, MissingChannelError

FIXED_FIELDS = (("version", 8), ("patient", 80), ("recording", 80), ("startdate", 8), ("starttime", 8),
                ("header_bytes", 8), ("reserved", 44), ("n_records", 8), ("record_duration", 8), ("ns", 4))
SIGNAL_FIELDS = (("label", 16), ("transducer", 80), ("dimension", 8), ("phys_min", 8), ("phys_max", 8),
                 ("dig_min", 8), ("dig_max", 8), ("prefilter", 80), ("samples_per_record", 8), ("reserved", 32))


@dataclass
class EdfSignal:
    label: str
    samples_per_record: int
    phys_min: float
    phys_max: float
    dig_min: int
    dig_max: int
    dimension: str = "uV"
    transducer: str = ""
    prefilter: str = ""

    @property
    def gain(self):
        return (self.phys_max - self.phys_min) / (self.dig_max - self.dig_min)


@dataclass
class EdfHeader:
    n_records: int
    record_duration: float
    signals: list
    patient: str = "X"
    recording: str = "X"
    startdate: str = "01.01.00"
    starttime: str = "00.00.00"
    reserved: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def header_bytes(self):
        return 256 * (1 + len(self.signals))

    def labels(self):
        return [s.label for s in self.signals]

    def sample_rate(self, index):
        return self.signals[index].samples_per_record / self.record_duration


def _field(raw: bytes, name):
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError(f"non-ASCII bytes in header field {name}") from exc


def _number(text, name, kind=float):
    try:
        return kind(text)
    except ValueError as exc:
        raise MalformedHeaderError(f"header field {name} is not a number: {text!r}") from exc


def read_header(fh) -> EdfHeader:
    fixed = fh.read(256)
    if len(fixed) == 0:
        raise EmptyFileError("file is empty")
    if len(fixed) < 256:
        raise MalformedHeaderError("file shorter than the 256-byte fixed header")
    vals, pos = {}, 0
    for name, width in FIXED_FIELDS:
        vals[name] = _field(fixed[pos:pos + width], name)
        pos += width
    if vals["version"] != "0":
        raise MalformedHeaderError(f"unsupported version field {vals['version']!r}")
    ns = _number(vals["ns"], "ns", int)
    if ns < 1:
        raise MalformedHeaderError("header declares no signals")
    header_bytes = _number(vals["header_bytes"], "header_bytes", int)
    if header_bytes != 256 * (ns + 1):
        raise MalformedHeaderError(f"header size {header_bytes} inconsistent with {ns} signals")
    block = fh.read(256 * ns)
    if len(block) < 256 * ns:
        raise MalformedHeaderError("truncated signal header")
    per = {}
    pos = 0
    for name, width in SIGNAL_FIELDS:
        per[name] = [_field(block[pos + k * width:pos + (k + 1) * width], name) for k in range(ns)]
        pos += width * ns
    signals = []
    for k in range(ns):
        sig = EdfSignal(
            label=per["label"][k],
            samples_per_record=_number(per["samples_per_record"][k], "samples_per_record", int),
            phys_min=_number(per["phys_min"][k], "phys_min"),
            phys_max=_number(per["phys_max"][k], "phys_max"),
            dig_min=_number(per["dig_min"][k], "dig_min", int),
            dig_max=_number(per["dig_max"][k], "dig_max", int),
            dimension=per["dimension"][k], transducer=per["transducer"][k], prefilter=per["prefilter"][k],
        )
        if sig.dig_max <= sig.dig_min or sig.samples_per_record < 1:
            raise MalformedHeaderError(f"invalid digital range or sample count for {sig.label!r}")
        signals.append(sig)
    duration = _number(vals["record_duration"], "record_duration")
    if not duration > 0:
        raise MalformedHeaderError("record duration must be positive")
    return EdfHeader(_number(vals["n_records"], "n_records", int), duration, signals, vals["patient"],
                     vals["recording"], vals["startdate"], vals["starttime"], vals["reserved"])


def read_edf(path, channel=None):
    """Return ``(header, {label: physical samples})`` for one or all channels.

    ``channel`` may be a label or an integer index.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header = read_header(fh)
        data = fh.read()
    labels = header.labels()
    if channel is None:
        wanted = list(range(len(labels)))
    elif isinstance(channel, int):
        if not 0 <= channel < len(labels):
            raise MissingChannelError(f"channel index {channel} out of range ({len(labels)} signals)")
        wanted = [channel]
    else:
        if channel not in labels:
            raise MissingChannelError(f"channel {channel!r} not found; available: {labels}")
        wanted = [labels.index(channel)]
    per_record = sum(s.samples_per_record for s in header.signals)
    n_rec = len(data) // (2 * per_record)
    if n_rec == 0:
        raise EmptyFileError("no complete data records")
    if header.n_records not in (-1, n_rec):
        raise MalformedHeaderError(f"header declares {header.n_records} records, file holds {n_rec}")
    raw = np.frombuffer(data[: n_rec * per_record * 2], dtype="<i2").reshape(n_rec, per_record)
    out, start = {}, 0
    offsets = []
    for s in header.signals:
        offsets.append(start)
        start += s.samples_per_record
    for k in wanted:
        s = header.signals[k]
        dig = raw[:, offsets[k]:offsets[k] + s.samples_per_record].reshape(-1).astype(float)
        out[s.label] = (dig - s.dig_min) * s.gain + s.phys_min
    return header, out


def _outward(x, width, rounder):
    """Round ``x`` in the direction of ``rounder`` until its text fits in ``width`` characters."""
    for decimals in range(6, -12, -1):
        scale = 10.0 ** decimals
        y = float(rounder(x * scale) / scale)
        text = repr(y) if decimals > 0 else str(int(y))
        if len(text) <= width:
            return y if decimals > 0 else float(int(y))
    exp = int(np.floor(np.log10(abs(x))))
    for digits in range(width, -1, -1):
        scale = 10.0 ** (exp - digits)
        y = float(rounder(x / scale) * scale)
        if len(f"{y:.{digits}e}") <= width and float(f"{y:.{digits}e}") == y:
            return y
    raise ValueError(f"physical range {x!r} cannot be written in {width} characters")


def write_edf(path, signals: dict, sample_rate, record_duration=1.0, dimension="uV", phys_range=None,
              patient="X", recording="X"):
    """Write equally sampled channels; each is quantised to int16."""
    labels = list(signals)
    arrays = [np.asarray(signals[k], dtype=float) for k in labels]
    n = arrays[0].size
    if any(a.size != n for a in arrays):
        raise ValueError("all channels must have the same length")
    spr = int(round(sample_rate * record_duration))
    if abs(spr - sample_rate * record_duration) > 1e-9:
        raise ValueError("sample_rate * record_duration must be an integer")
    n_rec = n // spr
    if n_rec == 0:
        raise ValueError("signal shorter than one data record")
    dig_min, dig_max = -32768, 32767
    sigs = []
    for label, a in zip(labels, arrays):
        lo, hi = phys_range if phys_range is not None else (float(a.min()), float(a.max()))
        if hi <= lo:
            hi = lo + 1.0
        lo, hi = _outward(lo, 8, np.floor), _outward(hi, 8, np.ceil)
        sigs.append(EdfSignal(label, spr, lo, hi, dig_min, dig_max, dimension))

    def pad(text, width):
        text = str(text)
        if len(text) > width:
            raise ValueError(f"{text!r} does not fit in {width} characters")
        return text.ljust(width).encode("ascii")

    def num(x, width):
        if isinstance(x, float):
            text = str(int(x)) if x.is_integer() and abs(x) < 1e8 else repr(x)
            if len(text) > width:
                text = min((f"{x:.{d}e}" for d in range(width) if float(f"{x:.{d}e}") == x), key=len, default=text)
        else:
            text = str(x)
        if len(text) > width:
            text = f"{x:.{max(width - 6, 1)}g}"
        return pad(text, width)

    head = b"".join([pad("0", 8), pad(patient, 80), pad(recording, 80), pad("01.01.00", 8), pad("00.00.00", 8),
                     pad(256 * (len(sigs) + 1), 8), pad("", 44), pad(n_rec, 8), num(record_duration, 8),
                     pad(len(sigs), 4)])
    cols = {
        "label": lambda s: pad(s.label, 16), "transducer": lambda s: pad(s.transducer, 80),
        "dimension": lambda s: pad(s.dimension, 8), "phys_min": lambda s: num(s.phys_min, 8),
        "phys_max": lambda s: num(s.phys_max, 8), "dig_min": lambda s: pad(s.dig_min, 8),
        "dig_max": lambda s: pad(s.dig_max, 8), "prefilter": lambda s: pad(s.prefilter, 80),
        "samples_per_record": lambda s: pad(s.samples_per_record, 8), "reserved": lambda s: pad("", 32),
    }
    head += b"".join(cols[name](s) for name, _ in SIGNAL_FIELDS for s in sigs)
    # re-read the written numeric fields so quantisation uses exactly the stored ranges
    digital = []
    for s, a in zip(sigs, arrays):
        pmin, pmax = float(num(s.phys_min, 8)), float(num(s.phys_max, 8))
        s.phys_min, s.phys_max = pmin, pmax
        d = np.round((a[: n_rec * spr] - pmin) / s.gain + dig_min)
        digital.append(np.clip(d, dig_min, dig_max).astype("<i2").reshape(n_rec, spr))
    body = np.concatenate(digital, axis=1)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(body.tobytes())
    return EdfHeader(n_rec, record_duration, sigs)
