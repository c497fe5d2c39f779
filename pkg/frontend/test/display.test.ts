import { describe, expect, it } from "vitest";
import {
  ansiImage, heatmapAscii, heatmapGrid, orbitEye, pngSize, rampChar, toneMap,
} from "../src/display.js";
import { TINY_PNG } from "../src/stub.js";

describe("tone mapping", () => {
  it("is monotone non-decreasing across the full range", () => {
    let prev = -1;
    for (let i = 0; i <= 1000; i++) {
      const v = toneMap(i / 1000);
      expect(v).toBeGreaterThanOrEqual(prev);
      prev = v;
    }
  });

  it("maps the endpoints exactly and clamps outside [0,1]", () => {
    expect(toneMap(0)).toBe(0);
    expect(toneMap(1)).toBe(255);
    expect(toneMap(-5)).toBe(0);
    expect(toneMap(7)).toBe(255);
  });

  it("ascii ramp is monotone in ramp position", () => {
    const ramp = " .:-=+*#%@";
    let prev = 0;
    for (let i = 0; i <= 100; i++) {
      const idx = ramp.indexOf(rampChar(i / 100));
      expect(idx).toBeGreaterThanOrEqual(prev);
      prev = idx;
    }
    expect(rampChar(0)).toBe(" ");
    expect(rampChar(1)).toBe("@");
  });
});

describe("heatmap grid", () => {
  it("reshapes row-major and renders one line per row", () => {
    const w = new Float32Array([0, 0.5, 1, 0.25, 0.75, 0.1]);
    const grid = heatmapGrid(w, 3);
    expect(grid).toEqual([[0, 0.5, 1], [0.25, 0.75, 0.10000000149011612]]);
    const ascii = heatmapAscii(w, 3);
    expect(ascii.split("\n").length).toBe(2);
    expect(ascii.split("\n")[0].length).toBe(3);
  });

  it("rejects a non-divisible column count", () => {
    expect(() => heatmapGrid(new Float32Array(5), 3)).toThrow(/divisible/);
  });
});

describe("png header", () => {
  it("reads dimensions from a real PNG", () => {
    expect(pngSize(TINY_PNG)).toEqual({ width: 1, height: 1 });
  });

  it("rejects non-PNG bytes", () => {
    expect(() => pngSize(new Uint8Array(32))).toThrow(/not a PNG/);
  });
});

describe("ansi image", () => {
  it("emits one line per two pixel rows and resets colors", () => {
    const rgb = new Uint8Array(4 * 4 * 3).fill(128);
    const out = ansiImage(rgb, 4, 4);
    expect(out.split("\n").length).toBe(2);
    expect(out.endsWith("\x1b[0m")).toBe(true);
    expect(() => ansiImage(rgb, 5, 4)).toThrow(/!=/);
  });
});

describe("orbit camera", () => {
  it("stays on the sphere around the target", () => {
    const target: [number, number, number] = [0, 1, 0];
    for (const az of [0, 1, 2, 4]) {
      const eye = orbitEye(target, 2.5, az, 0.3);
      const d = Math.hypot(eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]);
      expect(d).toBeCloseTo(2.5, 10);
    }
  });
});
