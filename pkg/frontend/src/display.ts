/**
 * Display helpers: tone mapping, heatmap grids, and terminal rendering.
 *
 * The tone map is strictly monotone: for any two attention weights or pixel
 * intensities a < b, the displayed level of a never exceeds that of b, so
 * visual ordering always reflects the underlying data.
 */

/** Gamma-corrected [0,1] -> display level [0,255]; strictly monotone. */
export function toneMap(value: number, gamma = 2.2): number {
  const v = Math.min(1, Math.max(0, value));
  return Math.round(255 * Math.pow(v, 1 / gamma));
}

const RAMP = " .:-=+*#%@";

/** Map [0,1] to an ascii ramp character (monotone in density). */
export function rampChar(value: number): string {
  const v = Math.min(1, Math.max(0, value));
  return RAMP[Math.min(RAMP.length - 1, Math.floor(v * RAMP.length))];
}

/**
 * Reshape a flat, peak-normalized heatmap row into its patch grid.
 * The grid is row-major: `patches = cols * rows`, cols = imgW / patch.
 */
export function heatmapGrid(weights: Float32Array, cols: number): number[][] {
  if (cols <= 0 || weights.length % cols !== 0) {
    throw new Error(`heatmap length ${weights.length} not divisible by ${cols} columns`);
  }
  const rows = weights.length / cols;
  const grid: number[][] = [];
  for (let r = 0; r < rows; r++) {
    grid.push(Array.from(weights.subarray(r * cols, (r + 1) * cols)));
  }
  return grid;
}

/** Ascii rendering of a heatmap grid via the monotone ramp. */
export function heatmapAscii(weights: Float32Array, cols: number): string {
  return heatmapGrid(weights, cols)
    .map((row) => row.map(rampChar).join(""))
    .join("\n");
}

/** ANSI 24-bit color block rendering of an RGB image (2 pixels per cell). */
export function ansiImage(rgb: Uint8Array, width: number, height: number): string {
  if (rgb.length !== width * height * 3) {
    throw new Error(`rgb buffer ${rgb.length} != ${width}x${height}x3`);
  }
  const lines: string[] = [];
  for (let y = 0; y + 1 < height; y += 2) {
    let line = "";
    for (let x = 0; x < width; x++) {
      const t = 3 * (y * width + x);
      const b = 3 * ((y + 1) * width + x);
      line += `\x1b[38;2;${rgb[t]};${rgb[t + 1]};${rgb[t + 2]}m` +
        `\x1b[48;2;${rgb[b]};${rgb[b + 1]};${rgb[b + 2]}m▀`;
    }
    lines.push(line + "\x1b[0m");
  }
  return lines.join("\n");
}

/** Read width/height from a PNG header without decoding the image. */
export function pngSize(png: Uint8Array): { width: number; height: number } {
  const sig = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];
  if (png.length < 24 || !sig.every((b, i) => png[i] === b)) {
    throw new Error("not a PNG");
  }
  const dv = new DataView(png.buffer, png.byteOffset, png.byteLength);
  return { width: dv.getUint32(16), height: dv.getUint32(20) };
}

/** Orbiting camera position around a fixed target. */
export function orbitEye(target: [number, number, number], radius: number,
                         azimuth: number, elevation: number): Float64Array {
  const ce = Math.cos(elevation);
  return Float64Array.of(
    target[0] + radius * ce * Math.sin(azimuth),
    target[1] + radius * Math.sin(elevation),
    target[2] + radius * ce * Math.cos(azimuth),
  );
}
