/**
 * Blocking-style client for the driving service: every request returns a
 * promise resolved by the reply carrying the same request id.  The server
 * guarantees exactly one reply per id even when pose updates are coalesced,
 * so the pending map never leaks while the connection lives.
 */

import * as net from "node:net";
import {
  FrameReader, Message, Packed, Tag, TypedArr,
  decodeMessage, encodeMessage, stringArr,
} from "./codec.js";

export interface FrameReply {
  png: Uint8Array;
  poseDecodeMs: number;
  renderMs: number;
  totalMs: number;
  frameIndex: number;
}

export interface RigInfo {
  jointNames: string[];
  parents: Int32Array;
  poseDim: number;
  exprDim: number;
  gazeDim: number;
}

export class ServiceError extends Error {}

export class ViewerClient {
  private sock: net.Socket;
  private reader = new FrameReader();
  private nextId = 1;
  private pending = new Map<number, { resolve: (m: Message) => void; reject: (e: Error) => void }>();
  private closed = false;

  private constructor(sock: net.Socket) {
    this.sock = sock;
    sock.on("data", (chunk: Buffer) => this.onData(chunk));
    sock.on("error", (err) => this.failAll(err));
    sock.on("close", () => this.failAll(new Error("connection closed")));
  }

  static connect(host: string, port: number, timeoutMs = 5000): Promise<ViewerClient> {
    return new Promise((resolve, reject) => {
      const sock = net.createConnection({ host, port });
      const timer = setTimeout(() => {
        sock.destroy();
        reject(new Error(`connect timeout to ${host}:${port}`));
      }, timeoutMs);
      sock.once("connect", () => {
        clearTimeout(timer);
        sock.setNoDelay(true);
        resolve(new ViewerClient(sock));
      });
      sock.once("error", (err) => {
        clearTimeout(timer);
        reject(err);
      });
    });
  }

  private onData(chunk: Buffer) {
    let frames: Buffer[];
    try {
      frames = this.reader.push(chunk);
    } catch (err) {
      this.failAll(err as Error);
      this.sock.destroy();
      return;
    }
    for (const frame of frames) {
      const msg = decodeMessage(frame);
      const waiter = this.pending.get(msg.requestId);
      if (waiter) {
        this.pending.delete(msg.requestId);
        waiter.resolve(msg);
      }
      // replies with unknown ids (e.g. server-initiated errors with id 0)
      // are dropped; the viewer has nothing to pair them with
    }
  }

  private failAll(err: Error) {
    if (this.closed) return;
    this.closed = true;
    for (const { reject } of this.pending.values()) reject(err);
    this.pending.clear();
  }

  request(tag: Tag, payload: Record<string, TypedArr | Packed>): Promise<Message> {
    if (this.closed) return Promise.reject(new Error("client closed"));
    const id = this.nextId++;
    return new Promise((resolve, reject) => {
      this.pending.set(id, { resolve, reject });
      this.sock.write(encodeMessage(tag, id, payload));
    });
  }

  private expect(msg: Message, tag: Tag): Message {
    if (msg.tag === Tag.Error) {
      const raw = msg.payload.get("message");
      throw new ServiceError(raw ? Buffer.from(raw.data.buffer, raw.data.byteOffset,
        raw.data.byteLength).toString("utf-8") : "unknown error");
    }
    if (msg.tag !== tag) throw new Error(`expected tag ${tag}, got ${msg.tag}`);
    return msg;
  }

  async setPose(theta: Float64Array, expression: Float64Array,
                gaze: Float64Array): Promise<FrameReply> {
    const msg = this.expect(
      await this.request(Tag.SetPose, { theta, expression, gaze }), Tag.Frame);
    return frameFromPayload(msg.payload);
  }

  async setCamera(eye: Float64Array, target: Float64Array, fx: number, fy: number,
                  width: number, height: number): Promise<FrameReply> {
    const msg = this.expect(await this.request(Tag.SetCamera, {
      eye, target,
      fx: Float64Array.of(fx), fy: Float64Array.of(fy),
      width: Int32Array.of(width), height: Int32Array.of(height),
    }), Tag.Frame);
    return frameFromPayload(msg.payload);
  }

  async getRig(): Promise<RigInfo> {
    const msg = this.expect(await this.request(Tag.GetRig, {}), Tag.Rig);
    return rigFromPayload(msg.payload);
  }

  async loadAvatar(path: string): Promise<RigInfo> {
    const msg = this.expect(
      await this.request(Tag.LoadAvatar, { path: stringArr(path) }), Tag.Rig);
    return rigFromPayload(msg.payload);
  }

  async getHeatmap(token: number, view: number): Promise<{ weights: Float32Array; patches: number }> {
    const msg = this.expect(await this.request(Tag.GetHeatmap, {
      token: Int32Array.of(token), view: Int32Array.of(view),
    }), Tag.Heatmap);
    const weights = msg.payload.get("weights")!.data as Float32Array;
    return { weights, patches: Number(msg.payload.get("patches")!.data[0]) };
  }

  close() {
    this.closed = true;
    this.sock.destroy();
  }
}

function frameFromPayload(p: Map<string, Packed>): FrameReply {
  const need = (k: string): Packed => {
    const v = p.get(k);
    if (!v) throw new Error(`frame reply missing ${k}`);
    return v;
  };
  return {
    png: need("png").data as Uint8Array,
    poseDecodeMs: Number(need("pose_decode_ms").data[0]),
    renderMs: Number(need("render_ms").data[0]),
    totalMs: Number(need("total_ms").data[0]),
    frameIndex: Number(need("frame_index").data[0]),
  };
}

function rigFromPayload(p: Map<string, Packed>): RigInfo {
  const names = p.get("joint_names")!;
  return {
    jointNames: Buffer.from(names.data.buffer, names.data.byteOffset,
      names.data.byteLength).toString("utf-8").split("\0"),
    parents: p.get("parents")!.data as Int32Array,
    poseDim: Number(p.get("pose_dim")!.data[0]),
    exprDim: Number(p.get("expr_dim")!.data[0]),
    gazeDim: Number(p.get("gaze_dim")!.data[0]),
  };
}
