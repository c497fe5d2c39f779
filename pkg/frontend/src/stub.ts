/**
 * In-process stub of the driving service, used by the viewer's offline tests.
 *
 * It implements the protocol semantics the client depends on — framing, the
 * payload container, latest-wins coalescing with exactly one reply per
 * request id, and the error paths — while replacing the renderer with a
 * canned PNG.  Conformance against the real Python service is covered by the
 * integration test.
 */

import * as net from "node:net";
import {
  FrameReader, Packed, Tag, arrString, encodeMessage, decodeMessage, stringArr,
} from "./codec.js";

/** Minimal valid 1x1 gray PNG (signature + IHDR + IDAT + IEND). */
export const TINY_PNG = new Uint8Array([
  0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a,
  0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52,
  0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01,
  0x08, 0x00, 0x00, 0x00, 0x00, 0x3a, 0x7e, 0x9b,
  0x55, 0x00, 0x00, 0x00, 0x0a, 0x49, 0x44, 0x41,
  0x54, 0x78, 0x9c, 0x63, 0x68, 0x00, 0x00, 0x00,
  0x82, 0x00, 0x81, 0xcb, 0x13, 0xb2, 0x61, 0x00,
  0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae,
  0x42, 0x60, 0x82,
]);

export interface StubConfig {
  jointNames?: string[];
  patches?: number;
  /** artificial render latency, to exercise coalescing */
  renderDelayMs?: number;
  hasAttention?: boolean;
}

interface SessionState {
  pendingIds: number[];
  theta: Float64Array | null;
  rendering: boolean;
  frameIndex: number;
}

export class StubServer {
  readonly server: net.Server;
  readonly config: Required<StubConfig>;
  /** how many frames were actually rendered (for coalescing assertions) */
  framesRendered = 0;

  constructor(config: StubConfig = {}) {
    this.config = {
      jointNames: config.jointNames ?? ["pelvis", "spine", "head"],
      patches: config.patches ?? 4,
      renderDelayMs: config.renderDelayMs ?? 0,
      hasAttention: config.hasAttention ?? true,
    };
    this.server = net.createServer((sock) => this.handle(sock));
  }

  get poseDim(): number {
    return 6 + 3 * this.config.jointNames.length;
  }

  listen(): Promise<number> {
    return new Promise((resolve) => {
      this.server.listen(0, "127.0.0.1", () => {
        resolve((this.server.address() as net.AddressInfo).port);
      });
    });
  }

  close() {
    this.server.close();
  }

  private handle(sock: net.Socket) {
    const reader = new FrameReader();
    const state: SessionState = {
      pendingIds: [], theta: null, rendering: false, frameIndex: 0,
    };
    sock.on("data", (chunk: Buffer) => {
      let frames: Buffer[];
      try {
        frames = reader.push(chunk);
      } catch (err) {
        this.sendError(sock, 0, String((err as Error).message));
        sock.destroy();
        return;
      }
      for (const frame of frames) {
        try {
          const msg = decodeMessage(frame);
          this.dispatch(sock, state, msg.tag, msg.requestId, msg.payload);
        } catch (err) {
          this.sendError(sock, 0, `malformed message: ${(err as Error).message}`);
        }
      }
    });
    sock.on("error", () => sock.destroy());
  }

  private dispatch(sock: net.Socket, state: SessionState, tag: number,
                   id: number, payload: Map<string, Packed>) {
    switch (tag) {
      case Tag.SetPose: {
        const theta = payload.get("theta");
        if (!theta || theta.data.length !== this.poseDim) {
          this.sendError(sock, id,
            `theta length ${theta?.data.length ?? 0} != ${this.poseDim}`);
          return;
        }
        state.theta = theta.data as Float64Array;
        this.enqueue(sock, state, id);
        break;
      }
      case Tag.SetCamera:
        this.enqueue(sock, state, id);
        break;
      case Tag.GetRig:
        sock.write(encodeMessage(Tag.Rig, id, this.rigPayload()));
        break;
      case Tag.LoadAvatar: {
        const path = payload.get("path");
        if (!path || !arrString(path).endsWith(".lcav")) {
          this.sendError(sock, id, "avatar load failed: bad path");
          return;
        }
        sock.write(encodeMessage(Tag.Rig, id, this.rigPayload()));
        break;
      }
      case Tag.GetHeatmap: {
        if (!this.config.hasAttention) {
          this.sendError(sock, id, "avatar has no recorded attention");
          return;
        }
        const token = Number(payload.get("token")?.data[0] ?? -1);
        if (token < 0 || token >= 16) {
          this.sendError(sock, id, `token ${token} out of range [0,16)`);
          return;
        }
        const weights = new Float32Array(this.config.patches);
        for (let i = 0; i < weights.length; i++) {
          weights[i] = (i + token) % weights.length / (weights.length - 1);
        }
        sock.write(encodeMessage(Tag.Heatmap, id, {
          weights, patches: Int32Array.of(this.config.patches),
        }));
        break;
      }
      default:
        this.sendError(sock, id, `unknown tag ${tag}`);
    }
  }

  /** Latest-wins coalescing identical to the reference server. */
  private enqueue(sock: net.Socket, state: SessionState, id: number) {
    state.pendingIds.push(id);
    if (state.rendering) return;
    state.rendering = true;
    const renderOnce = () => {
      const ids = state.pendingIds;
      state.pendingIds = [];
      this.framesRendered += 1;
      state.frameIndex += 1;
      const payload = {
        png: TINY_PNG,
        pose_decode_ms: Float64Array.of(0.1),
        render_ms: Float64Array.of(this.config.renderDelayMs),
        total_ms: Float64Array.of(this.config.renderDelayMs + 0.1),
        frame_index: Int32Array.of(state.frameIndex),
      };
      for (const rid of ids) sock.write(encodeMessage(Tag.Frame, rid, payload));
      if (state.pendingIds.length > 0) {
        setTimeout(renderOnce, this.config.renderDelayMs);
      } else {
        state.rendering = false;
      }
    };
    setTimeout(renderOnce, this.config.renderDelayMs);
  }

  private rigPayload() {
    return {
      joint_names: stringArr(this.config.jointNames.join("\0")),
      parents: new Int32Array(this.config.jointNames.map((_, i) => i - 1)),
      pose_dim: Int32Array.of(this.poseDim),
      expr_dim: Int32Array.of(8),
      gaze_dim: Int32Array.of(6),
    };
  }

  private sendError(sock: net.Socket, id: number, message: string) {
    sock.write(encodeMessage(Tag.Error, id, { message: stringArr(message) }));
  }
}
