import { afterEach, beforeEach, describe, expect, it } from "vitest";
import { ServiceError, ViewerClient } from "../src/client.js";
import { StubServer, TINY_PNG } from "../src/stub.js";

let server: StubServer;
let client: ViewerClient;

beforeEach(async () => {
  server = new StubServer();
  const port = await server.listen();
  client = await ViewerClient.connect("127.0.0.1", port);
});

afterEach(() => {
  client.close();
  server.close();
});

function restPose(dim: number) {
  return {
    theta: new Float64Array(dim),
    expression: new Float64Array(8),
    gaze: new Float64Array(6),
  };
}

describe("viewer client against the stub service", () => {
  it("fetches the rig and derives pose dimensions", async () => {
    const rig = await client.getRig();
    expect(rig.jointNames).toEqual(["pelvis", "spine", "head"]);
    expect(rig.poseDim).toBe(6 + 3 * 3);
    expect(rig.exprDim).toBe(8);
    expect(Array.from(rig.parents)).toEqual([-1, 0, 1]);
  });

  it("pose round trip returns a PNG frame with timings", async () => {
    const rig = await client.getRig();
    const { theta, expression, gaze } = restPose(rig.poseDim);
    const frame = await client.setPose(theta, expression, gaze);
    expect(Array.from(frame.png)).toEqual(Array.from(TINY_PNG));
    expect(frame.poseDecodeMs).toBeGreaterThan(0);
    expect(frame.frameIndex).toBe(1);
  });

  it("pose round trip stays under the interactive latency budget", async () => {
    const rig = await client.getRig();
    const { theta, expression, gaze } = restPose(rig.poseDim);
    await client.setPose(theta, expression, gaze); // warm up
    const times: number[] = [];
    for (let i = 0; i < 10; i++) {
      theta[6] = 0.01 * i;
      const t0 = performance.now();
      await client.setPose(theta, expression, gaze);
      times.push(performance.now() - t0);
    }
    times.sort((a, b) => a - b);
    expect(times[Math.floor(times.length / 2)]).toBeLessThan(100);
  });

  it("wrong theta length surfaces as a service error", async () => {
    await expect(client.setPose(new Float64Array(4), new Float64Array(8),
      new Float64Array(6))).rejects.toThrow(ServiceError);
  });

  it("coalesces a pipelined burst but answers every request id", async () => {
    const slow = new StubServer({ renderDelayMs: 20 });
    const port = await slow.listen();
    const c = await ViewerClient.connect("127.0.0.1", port);
    try {
      const rig = await c.getRig();
      const { expression, gaze } = restPose(rig.poseDim);
      const replies = await Promise.all(
        Array.from({ length: 12 }, (_, i) => {
          const theta = new Float64Array(rig.poseDim);
          theta[6] = 0.05 * i;
          return c.setPose(theta, expression, gaze);
        }));
      expect(replies.length).toBe(12);          // one reply per id...
      expect(slow.framesRendered).toBeLessThan(12); // ...fewer frames rendered
      const last = replies[replies.length - 1].frameIndex;
      expect(replies.every((r) => r.frameIndex <= last)).toBe(true);
    } finally {
      c.close();
      slow.close();
    }
  });

  it("loads avatars by path and rejects bad paths", async () => {
    const rig = await client.loadAvatar("/some/subject.lcav");
    expect(rig.poseDim).toBe(15);
    await expect(client.loadAvatar("/bad.txt")).rejects.toThrow(/load failed/);
  });

  it("heatmaps are normalized and sized by the patch count", async () => {
    const hm = await client.getHeatmap(2, 0);
    expect(hm.weights.length).toBe(hm.patches);
    for (const w of hm.weights) {
      expect(w).toBeGreaterThanOrEqual(0);
      expect(w).toBeLessThanOrEqual(1);
    }
    await expect(client.getHeatmap(99, 0)).rejects.toThrow(/out of range/);
  });

  it("a missing-attention avatar reports a service error", async () => {
    const bare = new StubServer({ hasAttention: false });
    const port = await bare.listen();
    const c = await ViewerClient.connect("127.0.0.1", port);
    try {
      await expect(c.getHeatmap(0, 0)).rejects.toThrow(/no recorded attention/);
    } finally {
      c.close();
      bare.close();
    }
  });
});
