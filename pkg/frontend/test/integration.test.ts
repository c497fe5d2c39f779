/**
 * Conformance of the real Python driving service against the same client
 * used on the stub: the behaviors asserted here mirror client_stub.test.ts.
 * Skipped automatically when the `lca` package is not importable.
 */

import { ChildProcess, execFileSync, spawn } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ViewerClient } from "../src/client.js";
import { pngSize } from "../src/display.js";

function havePython(): boolean {
  try {
    execFileSync("python3", ["-c", "import lca"], { stdio: "ignore" });
    return true;
  } catch {
    return false;
  }
}

const enabled = havePython();
const d = describe.skipIf(!enabled);

let workDir: string;
let proc: ChildProcess;
let client: ViewerClient;
let poseDim = 0;

beforeAll(async () => {
  if (!enabled) return;
  workDir = mkdtempSync(join(tmpdir(), "lca-viewer-"));
  const avatar = join(workDir, "subject.lcav");
  execFileSync("python3", ["-m", "lca.cli", "create", "--out", avatar,
    "--views", "2", "--seed", "3"], { stdio: "ignore", timeout: 120_000 });
  proc = spawn("python3", ["-m", "lca.cli", "serve", "--port", "0",
    "--avatar", avatar]);
  const port = await new Promise<number>((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("server did not start")), 60_000);
    proc.stdout!.on("data", (chunk: Buffer) => {
      const m = chunk.toString().match(/serving on [\d.]+:(\d+)/);
      if (m) {
        clearTimeout(timer);
        resolve(Number(m[1]));
      }
    });
    proc.on("exit", () => reject(new Error("server exited early")));
  });
  client = await ViewerClient.connect("127.0.0.1", port);
}, 180_000);

afterAll(() => {
  if (!enabled) return;
  client?.close();
  proc?.kill();
  rmSync(workDir, { recursive: true, force: true });
});

d("viewer client against the reference service", () => {
  it("fetches the rig", async () => {
    const rig = await client.getRig();
    expect(rig.jointNames.length).toBeGreaterThan(0);
    expect(rig.poseDim).toBe(6 + 3 * rig.jointNames.length);
    expect(rig.gazeDim).toBe(6);
    poseDim = rig.poseDim;
  });

  it("pose round trip returns a decodable frame under 100 ms", async () => {
    const theta = new Float64Array(poseDim);
    const expression = new Float64Array(8);
    const gaze = new Float64Array(6);
    await client.setPose(theta, expression, gaze); // warm up
    const times: number[] = [];
    let frame;
    for (let i = 0; i < 10; i++) {
      theta[7] = 0.03 * i;
      const t0 = performance.now();
      frame = await client.setPose(theta, expression, gaze);
      times.push(performance.now() - t0);
    }
    const size = pngSize(frame!.png);
    expect(size.width).toBeGreaterThan(0);
    expect(frame!.poseDecodeMs).toBeLessThan(10);
    times.sort((a, b) => a - b);
    expect(times[Math.floor(times.length / 2)]).toBeLessThan(100);
  });

  it("pipelined updates each get exactly one reply", async () => {
    const expression = new Float64Array(8);
    const gaze = new Float64Array(6);
    const replies = await Promise.all(
      Array.from({ length: 8 }, (_, i) => {
        const theta = new Float64Array(poseDim);
        theta[6] = 0.05 * i;
        return client.setPose(theta, expression, gaze);
      }));
    expect(replies.length).toBe(8);
  });

  it("camera updates change the frame size", async () => {
    const frame = await client.setCamera(Float64Array.of(0, 1.2, 2.4),
      Float64Array.of(0, 1, 0), 40, 40, 48, 32);
    expect(pngSize(frame.png)).toEqual({ width: 48, height: 32 });
  });

  it("serves normalized heatmaps and range errors", async () => {
    const hm = await client.getHeatmap(0, 0);
    expect(hm.weights.length).toBe(hm.patches);
    expect(Math.max(...hm.weights)).toBeLessThanOrEqual(1);
    await expect(client.getHeatmap(100000, 0)).rejects.toThrow(/out of range/);
  });

  it("rejects malformed poses without dropping the connection", async () => {
    await expect(client.setPose(new Float64Array(3), new Float64Array(8),
      new Float64Array(6))).rejects.toThrow(/theta/);
    const ok = await client.setPose(new Float64Array(poseDim),
      new Float64Array(8), new Float64Array(6));
    expect(ok.frameIndex).toBeGreaterThan(0);
  });
});
