"""Real-time driving service and frame codec.

Wire protocol (also documented in PROTOCOL.md): every message is

    u32 big-endian length | u8 tag | u32 big-endian request id | payload

where the length counts tag + request id + payload.  Payloads are the same
self-describing key-value array packing used inside avatar files; strings and
PNG bytes travel as uint8 arrays.

Client -> server tags: SET_POSE, SET_CAMERA, GET_HEATMAP, LOAD_AVATAR, GET_RIG.
Server -> client tags: FRAME, HEATMAP, ERROR, RIG.

Pose and camera updates are coalesced latest-wins: if updates arrive faster
than rendering, only the newest state is rendered, and every superseded
request id is answered with that newest frame — exactly one reply per id.
"""

from __future__ import annotations

import io
import socket
import socketserver
import struct
import threading
import time

import numpy as np
from PIL import Image

from .avatar import (AvatarFile, Camera, DrivingSignal, load_avatar,
                     pack_arrays, unpack_arrays)
from .pipeline import drive_frame

TAG_SET_POSE = 1
TAG_SET_CAMERA = 2
TAG_GET_HEATMAP = 3
TAG_LOAD_AVATAR = 4
TAG_GET_RIG = 5
TAG_FRAME = 129
TAG_HEATMAP = 130
TAG_ERROR = 131
TAG_RIG = 132

CLIENT_TAGS = {TAG_SET_POSE, TAG_SET_CAMERA, TAG_GET_HEATMAP,
               TAG_LOAD_AVATAR, TAG_GET_RIG}


def _str_arr(s: str) -> np.ndarray:
    return np.frombuffer(s.encode(), dtype=np.uint8).copy()


def _arr_str(a: np.ndarray) -> str:
    return a.tobytes().decode()


def encode_message(tag: int, request_id: int, payload: dict) -> bytes:
    body = pack_arrays(payload)
    inner = struct.pack(">BI", tag, request_id) + body
    return struct.pack(">I", len(inner)) + inner


def decode_message(data: bytes) -> tuple[int, int, dict]:
    if len(data) < 5:
        raise ValueError("message shorter than tag + request id")
    tag, request_id = struct.unpack(">BI", data[:5])
    return tag, request_id, unpack_arrays(data[5:])


def read_message(sock: socket.socket) -> bytes | None:
    """Read one length-prefixed message; None on clean EOF."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > 64 * 1024 * 1024:
        raise ValueError(f"message length {length} exceeds limit")
    body = _read_exact(sock, length)
    if body is None:
        raise ValueError("connection closed mid-message")
    return body


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else buf  # partial read surfaces as short
        buf += chunk
    return buf


def png_bytes(rgb: np.ndarray) -> bytes:
    arr = np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)
    out = io.BytesIO()
    Image.fromarray(arr).save(out, format="PNG")
    return out.getvalue()


def camera_from_payload(p: dict) -> Camera:
    return Camera.look_at(p["eye"], p["target"], fx=float(p["fx"][0]),
                          fy=float(p["fy"][0]), width=int(p["width"][0]),
                          height=int(p["height"][0]))


def default_camera(avatar: AvatarFile, width: int = 64, height: int = 48) -> Camera:
    target = np.array([0.0, avatar.rig.joint_positions[0, 1] * 1.05, 0.0])
    return Camera.look_at(target + np.array([0.0, 0.15, 2.3]), target,
                          fx=40.0, fy=40.0, width=width, height=height)


def rig_payload(avatar: AvatarFile) -> dict:
    rig = avatar.rig
    pw = avatar.pose_weights
    expr_dim = len(pw["stats.signal_mean"]) - rig.pose_dim - 6
    return {"joint_names": _str_arr("\x00".join(rig.joint_names)),
            "parents": rig.parents.astype(np.int32),
            "pose_dim": np.array([rig.pose_dim], np.int32),
            "expr_dim": np.array([expr_dim], np.int32),
            "gaze_dim": np.array([6], np.int32)}


class Session:
    """One client's state: loaded avatar, current pose/camera, render worker."""

    def __init__(self, sock: socket.socket, avatar: AvatarFile | None):
        self.sock = sock
        self.avatar = avatar
        self.camera = default_camera(avatar) if avatar else None
        self.signal = (DrivingSignal.rest(avatar.rig) if avatar else None)
        self.send_lock = threading.Lock()
        self.cond = threading.Condition()
        self.pending_ids: list[int] = []
        self.dirty = False
        self.closed = False
        self.frame_counter = 0
        self.worker = threading.Thread(target=self._render_loop, daemon=True)
        self.worker.start()

    def send(self, tag: int, request_id: int, payload: dict):
        data = encode_message(tag, request_id, payload)
        with self.send_lock:
            try:
                self.sock.sendall(data)
            except OSError:
                pass

    def send_error(self, request_id: int, message: str):
        self.send(TAG_ERROR, request_id, {"message": _str_arr(message)})

    def enqueue_render(self, request_id: int):
        with self.cond:
            self.pending_ids.append(request_id)
            self.dirty = True
            self.cond.notify()

    def close(self):
        with self.cond:
            self.closed = True
            self.cond.notify()

    def _render_loop(self):
        while True:
            with self.cond:
                while not self.dirty and not self.closed:
                    self.cond.wait()
                if self.closed:
                    return
                ids = self.pending_ids
                self.pending_ids = []
                self.dirty = False
                signal, camera = self.signal, self.camera
            if self.avatar is None:
                for rid in ids:
                    self.send_error(rid, "no avatar loaded")
                continue
            t0 = time.perf_counter()
            rgb, _, timings = drive_frame(self.avatar, signal, camera)
            png = png_bytes(rgb)
            total = time.perf_counter() - t0
            self.frame_counter += 1
            payload = {"png": np.frombuffer(png, np.uint8).copy(),
                       "pose_decode_ms": np.array([timings["pose_decode"] * 1e3]),
                       "render_ms": np.array([timings["render"] * 1e3]),
                       "total_ms": np.array([total * 1e3]),
                       "frame_index": np.array([self.frame_counter], np.int64)}
            # answer the newest request and every coalesced-away one with the
            # same (newest) frame, so each id gets exactly one reply
            for rid in ids:
                self.send(TAG_FRAME, rid, payload)

    def handle(self, tag: int, request_id: int, payload: dict):
        if tag == TAG_SET_POSE:
            rig = self.avatar.rig if self.avatar else None
            if rig is None:
                self.send_error(request_id, "no avatar loaded")
                return
            sig = DrivingSignal(theta=payload["theta"],
                                expression=payload["expression"],
                                gaze=payload["gaze"])
            if sig.theta.shape != (rig.pose_dim,):
                self.send_error(request_id,
                                f"theta length {len(sig.theta)} != {rig.pose_dim}")
                return
            with self.cond:
                self.signal = sig
            self.enqueue_render(request_id)
        elif tag == TAG_SET_CAMERA:
            with self.cond:
                self.camera = camera_from_payload(payload)
            self.enqueue_render(request_id)
        elif tag == TAG_GET_HEATMAP:
            self._heatmap(request_id, payload)
        elif tag == TAG_LOAD_AVATAR:
            try:
                avatar = load_avatar(_arr_str(payload["path"]))
            except Exception as exc:
                self.send_error(request_id, f"avatar load failed: {exc}")
                return
            with self.cond:
                self.avatar = avatar
                self.camera = default_camera(avatar)
                self.signal = DrivingSignal.rest(avatar.rig)
            self.send(TAG_RIG, request_id, rig_payload(avatar))
        elif tag == TAG_GET_RIG:
            if self.avatar is None:
                self.send_error(request_id, "no avatar loaded")
            else:
                self.send(TAG_RIG, request_id, rig_payload(self.avatar))
        else:
            self.send_error(request_id, f"unknown tag {tag}")

    def _heatmap(self, request_id: int, payload: dict):
        if self.avatar is None or "attention" not in self.avatar.meta:
            self.send_error(request_id, "avatar has no recorded attention")
            return
        att = self.avatar.meta["attention"]
        token = int(payload["token"][0])
        view = int(payload["view"][0])
        g = self.avatar.tokens.shape[0]
        n_views = int(self.avatar.meta["n_views"][0])
        if not 0 <= token < g:
            self.send_error(request_id, f"token {token} out of range [0,{g})")
            return
        patches = (att.shape[1] - 1 - g) // n_views
        if not 0 <= view < n_views:
            self.send_error(request_id, f"view {view} out of range [0,{n_views})")
            return
        row = att[token, g + view * patches: g + (view + 1) * patches]
        peak = row.max()
        norm = row / peak if peak > 0 else row
        self.send(TAG_HEATMAP, request_id,
                  {"weights": norm.astype(np.float32),
                   "patches": np.array([patches], np.int64)})


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        session = Session(self.request, self.server.avatar)  # type: ignore[attr-defined]
        try:
            while True:
                try:
                    data = read_message(self.request)
                except ValueError as exc:
                    # framing is broken beyond recovery for this connection
                    session.send_error(0, str(exc))
                    break
                if data is None:
                    break
                try:
                    tag, request_id, payload = decode_message(data)
                    if tag not in CLIENT_TAGS:
                        session.send_error(request_id, f"unknown tag {tag}")
                        continue
                    session.handle(tag, request_id, payload)
                except Exception as exc:  # malformed message never kills the server
                    session.send_error(0, f"malformed message: {exc}")
        finally:
            session.close()


class AvatarServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple, avatar: AvatarFile | None):
        super().__init__(address, _Handler)
        self.avatar = avatar


def serve(host: str, port: int, avatar_path: str | None = None) -> AvatarServer:
    avatar = load_avatar(avatar_path) if avatar_path else None
    server = AvatarServer((host, port), avatar)
    return server


class Client:
    """Minimal blocking client used by tests and benchmarks."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.next_id = 1

    def request(self, tag: int, payload: dict) -> tuple[int, int, dict]:
        rid = self.next_id
        self.next_id += 1
        self.sock.sendall(encode_message(tag, rid, payload))
        data = read_message(self.sock)
        if data is None:
            raise ConnectionError("server closed connection")
        return decode_message(data)

    def set_pose(self, sig: DrivingSignal) -> tuple[int, int, dict]:
        return self.request(TAG_SET_POSE, {"theta": sig.theta,
                                           "expression": sig.expression,
                                           "gaze": sig.gaze})

    def close(self):
        self.sock.close()
