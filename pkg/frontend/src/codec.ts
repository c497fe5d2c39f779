/**
 * Wire codec for the avatar driving service (see ../../PROTOCOL.md).
 *
 * Outer framing is big-endian:
 *   u32 length | u8 tag | u32 request id | payload
 * The payload is a self-describing key/value array container whose integers
 * are little-endian (it is shared with the avatar file format).
 */

export enum Tag {
  SetPose = 1,
  SetCamera = 2,
  GetHeatmap = 3,
  LoadAvatar = 4,
  GetRig = 5,
  Frame = 129,
  Heatmap = 130,
  Error = 131,
  Rig = 132,
}

export type Payload = Record<string, TypedArr>;
export type TypedArr = Float32Array | Float64Array | Uint32Array | Int32Array | Uint8Array;

/** Payload values carry their shape so multi-dimensional arrays survive. */
export interface Packed {
  data: TypedArr;
  shape: number[];
}

const DTYPE_CODES = new Map<Function, number>([
  [Float32Array, 0],
  [Float64Array, 1],
  [Uint32Array, 2],
  [Int32Array, 3],
  [Uint8Array, 4],
]);

const CODE_CTORS: Array<{ ctor: any; itemsize: number }> = [
  { ctor: Float32Array, itemsize: 4 },
  { ctor: Float64Array, itemsize: 8 },
  { ctor: Uint32Array, itemsize: 4 },
  { ctor: Int32Array, itemsize: 4 },
  { ctor: Uint8Array, itemsize: 1 },
];

export interface Message {
  tag: Tag;
  requestId: number;
  payload: Map<string, Packed>;
}

function asPacked(value: TypedArr | Packed): Packed {
  if (value instanceof Float32Array || value instanceof Float64Array ||
      value instanceof Uint32Array || value instanceof Int32Array ||
      value instanceof Uint8Array) {
    return { data: value, shape: [value.length] };
  }
  return value;
}

export function packArrays(entries: Record<string, TypedArr | Packed>): Buffer {
  const keys = Object.keys(entries).sort();
  const parts: Buffer[] = [];
  const head = Buffer.alloc(2);
  head.writeUInt16LE(keys.length, 0);
  parts.push(head);
  for (const key of keys) {
    const { data, shape } = asPacked(entries[key]);
    const code = DTYPE_CODES.get(data.constructor);
    if (code === undefined) throw new Error(`unsupported array type for ${key}`);
    const kb = Buffer.from(key, "utf-8");
    if (kb.length > 255) throw new Error(`key too long: ${key}`);
    const meta = Buffer.alloc(1 + kb.length + 2 + 4 * shape.length);
    let off = 0;
    meta.writeUInt8(kb.length, off); off += 1;
    kb.copy(meta, off); off += kb.length;
    meta.writeUInt8(code, off); off += 1;
    meta.writeUInt8(shape.length, off); off += 1;
    for (const d of shape) { meta.writeUInt32LE(d, off); off += 4; }
    parts.push(meta, Buffer.from(data.buffer, data.byteOffset, data.byteLength));
  }
  return Buffer.concat(parts);
}

export function unpackArrays(buf: Buffer): Map<string, Packed> {
  if (buf.length < 2) throw new Error("payload shorter than entry count");
  const count = buf.readUInt16LE(0);
  let off = 2;
  const out = new Map<string, Packed>();
  for (let i = 0; i < count; i++) {
    const klen = buf.readUInt8(off); off += 1;
    const key = buf.subarray(off, off + klen).toString("utf-8"); off += klen;
    const code = buf.readUInt8(off); off += 1;
    const ndim = buf.readUInt8(off); off += 1;
    if (code >= CODE_CTORS.length) throw new Error(`unknown dtype code ${code}`);
    const shape: number[] = [];
    for (let d = 0; d < ndim; d++) { shape.push(buf.readUInt32LE(off)); off += 4; }
    const n = shape.reduce((a, b) => a * b, 1);
    const { ctor, itemsize } = CODE_CTORS[code];
    const nbytes = n * itemsize;
    if (off + nbytes > buf.length) throw new Error(`truncated array ${key}`);
    // copy so the typed array is aligned and detached from the socket buffer
    const raw = Buffer.alloc(nbytes);
    buf.copy(raw, 0, off, off + nbytes);
    off += nbytes;
    out.set(key, { data: new ctor(raw.buffer, 0, n), shape });
  }
  return out;
}

export function encodeMessage(tag: Tag, requestId: number,
                              payload: Record<string, TypedArr | Packed>): Buffer {
  const body = packArrays(payload);
  const out = Buffer.alloc(4 + 5 + body.length);
  out.writeUInt32BE(5 + body.length, 0);
  out.writeUInt8(tag, 4);
  out.writeUInt32BE(requestId, 5);
  body.copy(out, 9);
  return out;
}

export function decodeMessage(frame: Buffer): Message {
  if (frame.length < 5) throw new Error("message shorter than tag + request id");
  return {
    tag: frame.readUInt8(0),
    requestId: frame.readUInt32BE(1),
    payload: unpackArrays(frame.subarray(5)),
  };
}

/**
 * Incremental frame splitter: feed socket chunks, emit complete frames
 * (without the length prefix).
 */
export class FrameReader {
  private buf: Buffer = Buffer.alloc(0);
  static readonly MAX_FRAME = 64 * 1024 * 1024;

  push(chunk: Buffer): Buffer[] {
    this.buf = this.buf.length ? Buffer.concat([this.buf, chunk]) : chunk;
    const frames: Buffer[] = [];
    while (this.buf.length >= 4) {
      const length = this.buf.readUInt32BE(0);
      if (length > FrameReader.MAX_FRAME) {
        throw new Error(`message length ${length} exceeds limit`);
      }
      if (this.buf.length < 4 + length) break;
      frames.push(this.buf.subarray(4, 4 + length));
      this.buf = this.buf.subarray(4 + length);
    }
    return frames;
  }

  /** Bytes buffered but not yet forming a complete frame. */
  pending(): number {
    return this.buf.length;
  }
}

export function stringArr(s: string): Uint8Array {
  return new Uint8Array(Buffer.from(s, "utf-8"));
}

export function arrString(a: Packed | TypedArr): string {
  const p = asPacked(a);
  return Buffer.from(p.data.buffer, p.data.byteOffset, p.data.byteLength)
    .toString("utf-8");
}
