"""Black-box detectors: in-process plugins and a subprocess array-exchange protocol.

Every frame is ``version:u8 | length:u32 | payload`` (little-endian).

Request payload::

    height:u32 | width:u32 | channels:u8 | modality:u8 (0 visible, 1 infrared)
    | pixels: height*width*channels bytes, row-major, 8-bit

Response payload::

    count:u32 | count * (x1:f32 y1:f32 x2:f32 y2:f32 score:f32 class:i32)
"""
import importlib
import shlex
import struct
import subprocess
import threading

import numpy as np
import torch

from ..errors import ProtocolError, RegistrationError
from .boxes import nms

PROTOCOL_VERSION = 1
MODALITY_TAGS = {"visible": 0, "infrared": 1}
_HEADER = struct.Struct("<BI")
_REQ = struct.Struct("<IIBB")
_DET = struct.Struct("<fffffi")


def _frame(payload):
    return _HEADER.pack(PROTOCOL_VERSION, len(payload)) + payload


def _read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise ProtocolError(f"stream closed after {len(buf)} of {n} bytes")
        buf += chunk
    return buf


def read_frame(stream):
    version, length = _HEADER.unpack(_read_exact(stream, _HEADER.size))
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version mismatch: got {version}, expected {PROTOCOL_VERSION}")
    return _read_exact(stream, length)


def _to_uint8(arr):
    return np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_request(image, modality):
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        arr = _to_uint8(arr)
    h, w, c = arr.shape
    return _frame(_REQ.pack(h, w, c, MODALITY_TAGS[modality]) + np.ascontiguousarray(arr).tobytes())


def decode_request(payload):
    if len(payload) < _REQ.size:
        raise ProtocolError(f"request payload too short ({len(payload)} bytes)")
    h, w, c, tag = _REQ.unpack_from(payload)
    pixels = payload[_REQ.size:]
    if len(pixels) != h * w * c:
        raise ProtocolError(f"request declares {h}x{w}x{c} pixels but carries {len(pixels)} bytes")
    modality = {v: k for k, v in MODALITY_TAGS.items()}.get(tag)
    if modality is None:
        raise ProtocolError(f"unknown modality tag {tag}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, c), modality


def encode_response(detections):
    """``detections``: iterable of ``(x1, y1, x2, y2, score, class_id)``."""
    dets = list(detections)
    body = struct.pack("<I", len(dets)) + b"".join(_DET.pack(*map(float, d[:5]), int(d[5])) for d in dets)
    return _frame(body)


def decode_response(payload):
    if len(payload) < 4:
        raise ProtocolError("response payload too short")
    (count,) = struct.unpack_from("<I", payload)
    if len(payload) != 4 + count * _DET.size:
        raise ProtocolError(f"response declares {count} detections but carries {len(payload) - 4} bytes")
    return [_DET.unpack_from(payload, 4 + k * _DET.size) for k in range(count)]


def serve(handler, stdin, stdout):
    """Request loop for plugin executables: ``handler(uint8_image, modality) -> detections``."""
    while True:
        try:
            payload = read_frame(stdin)
        except ProtocolError:
            return
        image, modality = decode_request(payload)
        stdout.write(encode_response(handler(image, modality)))
        stdout.flush()


class _ExternalModel:
    """Adapter giving an external detector the toy model's raw/filter interface.

    External detectors report final detections only, so those serve as the
    raw candidates (no gradient). Plugins always receive 8-bit images, in
    process or over the pipe.
    """

    differentiable = False

    def __init__(self, call, modality, nms_iou=0.5):
        self._call = call
        self.modality = modality
        self.nms_iou = nms_iou

    def raw_candidates(self, images):
        x = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
        boxes, scores = [], []
        for img in x:
            if img.dtype != np.uint8:
                img = _to_uint8(img)
            dets = list(self._call(img, self.modality))
            b = np.array([d[:4] for d in dets], dtype=np.float64).reshape(-1, 4)
            s = np.array([d[4] for d in dets], dtype=np.float64).reshape(-1)
            boxes.append(torch.from_numpy(b))
            scores.append(torch.from_numpy(s))
        return boxes, scores

    def filter(self, boxes, scores, threshold=0.5):
        b = boxes.numpy() if isinstance(boxes, torch.Tensor) else np.asarray(boxes)
        s = scores.numpy() if isinstance(scores, torch.Tensor) else np.asarray(scores)
        sel = np.flatnonzero(s >= threshold)
        keep = sel[nms(b[sel], s[sel], self.nms_iou)] if len(sel) else sel
        return b[keep], s[keep]

    def checksum(self):
        return repr(self._call)


class SubprocessClient:
    """One long-lived plugin process; requests are serialized by a lock."""

    def __init__(self, command):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise RegistrationError(f"cannot start detector process {self.command}: {exc}") from exc

    def __call__(self, image, modality):
        with self._lock:
            if self._proc.poll() is not None:
                raise ProtocolError(f"detector process exited with code {self._proc.returncode}")
            try:
                self._proc.stdin.write(encode_request(image, modality))
                self._proc.stdin.flush()
            except BrokenPipeError as exc:
                raise ProtocolError("detector process closed its input") from exc
            return decode_response(read_frame(self._proc.stdout))

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __repr__(self):
        return f"SubprocessClient({self.command!r})"


def _load_callable(target):
    module_name, _, attr = target.partition(":")
    if not attr:
        raise RegistrationError(f"plugin target must look like 'module:callable', got {target!r}")
    try:
        obj = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise RegistrationError(f"cannot import plugin {target!r}: {exc}") from exc
    if not callable(obj):
        raise RegistrationError(f"plugin {target!r} is not callable")
    return obj


def register_external(descriptor):
    """Build a non-differentiable :class:`DetectorHandle` from a descriptor.

    ``descriptor`` is a mapping with ``id``, ``modality`` (visible, infrared or
    dual) and either ``plugin: "module:callable"`` or ``command`` (string or
    argv list). A 1 x 1 probe image is sent per branch as a handshake.
    """
    from .gateway import DetectorHandle

    modality = descriptor.get("modality", "visible")
    mods = ("visible", "infrared") if modality == "dual" else (modality,)
    if "plugin" in descriptor:
        call = _load_callable(descriptor["plugin"])
    elif "command" in descriptor:
        call = SubprocessClient(descriptor["command"])
    else:
        raise RegistrationError("descriptor needs either 'plugin' or 'command'")
    for m in mods:
        probe = np.zeros((1, 1, 3 if m == "visible" else 1), dtype=np.uint8)
        try:
            list(call(probe, m))
        except (ProtocolError, OSError, ValueError, struct.error) as exc:
            if isinstance(call, SubprocessClient):
                call.close()
            raise RegistrationError(f"handshake with detector {descriptor.get('id')!r} failed: {exc}") from exc
    branches = {m: _ExternalModel(call, m) for m in mods}
    return DetectorHandle(id=descriptor.get("id", "external"), differentiable=False, modality=modality,
                          branches=branches)
