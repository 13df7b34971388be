"""On-disk formats for sessions, trials and ground truth.

Session / trial binary layout (little endian)::

    offset  size  field
    0       8     magic  b"SPDREG01"  (format version 01)
    8       4     uint32 channel count C
    12      8     uint64 sample count T
    20      8     float64 sample rate (Hz)
    28      2     uint16 byte length L of the subject id
    30      L     subject id, UTF-8
    30+L    4*C*T float32 samples, row-major (channel by channel)

A session ``name.spd`` has a sidecar ``name.events.csv`` with header
``onset_s,rt_s``. A trial file stores N trials of S samples back to back
(T = N * S) and its sidecar ``name.trials.csv`` has header
``trial,onset_s,label,samples``.
"""

import csv
import struct
from pathlib import Path

import numpy as np

from .exceptions import FileFormatError
from .preprocess import SessionRecording
from .trial import Trial

MAGIC = b"SPDREG01"
_HEAD = struct.Struct("<8sIQdH")


def _sidecar(path, suffix):
    path = Path(path)
    return path.with_name(path.stem + suffix)


def write_binary(path, data, sample_rate, subject_id):
    data = np.ascontiguousarray(data, dtype="<f4")
    sid = subject_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, data.shape[0], data.shape[1],
                            float(sample_rate), len(sid)))
        fh.write(sid)
        fh.write(data.tobytes(order="C"))


def read_binary(path):
    """Return ``(data, sample_rate, subject_id)``; ``data`` is float32."""
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise FileFormatError(f"{path}: truncated header")
        magic, c, t, fs, n_id = _HEAD.unpack(head)
        if magic != MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}")
        sid = fh.read(n_id).decode("utf-8")
        raw = fh.read()
    if len(raw) != 4 * c * t:
        raise FileFormatError(
            f"{path}: expected {4 * c * t} data bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(c, t), fs, sid


def write_session(path, rec):
    """Write ``rec`` to ``path`` plus the ``.events.csv`` sidecar."""
    write_binary(path, rec.continuous_data, rec.sample_rate, rec.subject_id)
    with open(_sidecar(path, ".events.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["onset_s", "rt_s"])
        for onset, rt in rec.events:
            w.writerow([repr(float(onset)), repr(float(rt))])


def read_session(path):
    data, fs, sid = read_binary(path)
    events = []
    with open(_sidecar(path, ".events.csv"), newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            events.append((float(row["onset_s"]), float(row["rt_s"])))
    return SessionRecording(fs, data, np.array(events).reshape(-1, 2), sid,
                            session_id=Path(path).stem)


def write_truth(path, truth):
    """``*.truth.csv``: latent path rows, then per-event true RTs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "z", "true_rt"])
        ev = dict(zip(np.round(truth.event_times, 6), truth.true_rts))
        for t, z in zip(truth.latent_times, truth.latent_path):
            w.writerow([repr(float(t)), repr(float(z)), ""])
        for t, rt in sorted(ev.items()):
            z = float(np.interp(t, truth.latent_times, truth.latent_path))
            w.writerow([repr(float(t)), repr(z), repr(float(rt))])


def write_trials(path, trials, sample_rate, subject_id):
    """Trials back to back in the session layout plus a label sidecar."""
    if not trials:
        raise FileFormatError("no trials to write")
    data = np.concatenate([t.data for t in trials], axis=1)
    write_binary(path, data, sample_rate, subject_id)
    with open(_sidecar(path, ".trials.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "onset_s", "label", "samples"])
        for i, t in enumerate(trials):
            w.writerow([i, repr(t.onset_time), repr(t.label), t.samples])


def read_trials(path):
    """Return ``(trials, sample_rate, subject_id)``."""
    data, fs, sid = read_binary(path)
    trials, start = [], 0
    with open(_sidecar(path, ".trials.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            s = int(row["samples"])
            trials.append(Trial(data[:, start:start + s].astype(float),
                                float(row["label"]), float(row["onset_s"])))
            start += s
    if start != data.shape[1]:
        raise FileFormatError(f"{path}: sidecar does not cover the data")
    return trials, fs, sid
