/**
 * Interactive terminal viewer for the avatar driving service.
 *
 * Usage: node dist/main.js [host] [port]
 *
 * Keys:
 *   left/right      orbit the camera
 *   up/down         raise / lower the camera
 *   tab / shift-tab select joint
 *   + / -           rotate the selected joint
 *   e / E           expression first coefficient up / down
 *   h               show the attention heatmap for the selected joint's token
 *   r               reset pose
 *   q               quit
 */

import { ViewerClient } from "./client.js";
import { heatmapAscii, orbitEye, pngSize } from "./display.js";

const HOST = process.argv[2] ?? "127.0.0.1";
const PORT = Number(process.argv[3] ?? 7707);

async function main() {
  const client = await ViewerClient.connect(HOST, PORT);
  const rig = await client.getRig();
  const theta = new Float64Array(rig.poseDim);
  const expression = new Float64Array(rig.exprDim);
  const gaze = new Float64Array(rig.gazeDim);
  let joint = 0;
  let azimuth = 0;
  let elevation = 0.1;
  const target: [number, number, number] = [0, 1, 0];

  const redraw = async () => {
    const frame = await client.setPose(theta, expression, gaze);
    const { width, height } = pngSize(frame.png);
    process.stdout.write(
      `\rframe ${frame.frameIndex}  ${width}x${height}  ` +
      `pose ${frame.poseDecodeMs.toFixed(2)}ms  ` +
      `render ${frame.renderMs.toFixed(1)}ms  ` +
      `joint ${rig.jointNames[joint]}   `);
  };

  const moveCamera = async () => {
    await client.setCamera(orbitEye(target, 2.3, azimuth, elevation),
      Float64Array.from(target), 40, 40, 64, 48);
    await redraw();
  };

  process.stdin.setRawMode?.(true);
  process.stdin.resume();
  process.stdin.on("data", async (key: Buffer) => {
    const s = key.toString();
    try {
      if (s === "q" || s === "\x03") {
        client.close();
        process.exit(0);
      } else if (s === "\x1b[C") { azimuth += 0.2; await moveCamera(); }
      else if (s === "\x1b[D") { azimuth -= 0.2; await moveCamera(); }
      else if (s === "\x1b[A") { elevation += 0.1; await moveCamera(); }
      else if (s === "\x1b[B") { elevation -= 0.1; await moveCamera(); }
      else if (s === "\t") { joint = (joint + 1) % rig.jointNames.length; await redraw(); }
      else if (s === "+") { theta[6 + 3 * joint] += 0.1; await redraw(); }
      else if (s === "-") { theta[6 + 3 * joint] -= 0.1; await redraw(); }
      else if (s === "e") { expression[0] += 0.2; await redraw(); }
      else if (s === "E") { expression[0] -= 0.2; await redraw(); }
      else if (s === "r") { theta.fill(0); expression.fill(0); await redraw(); }
      else if (s === "h") {
        const hm = await client.getHeatmap(joint, 0);
        const cols = Math.round(Math.sqrt(hm.patches));
        process.stdout.write("\n" + heatmapAscii(hm.weights, cols) + "\n");
      }
    } catch (err) {
      process.stdout.write(`\n${(err as Error).message}\n`);
    }
  });

  console.log(`connected to ${HOST}:${PORT}; rig has ${rig.jointNames.length} joints`);
  await redraw();
}

main().catch((err) => {
  console.error(err.message);
  process.exit(1);
});
