// Length-prefixed JSON framing: 32-bit little-endian payload length followed
// by that many bytes of UTF-8 JSON. Frames above 16 MiB are rejected.

export const MAX_FRAME_BYTES = 16 * 1024 * 1024;

export interface WireMessage {
  type: string;
  [key: string]: unknown;
}

export class FramingError extends Error {
  constructor(public code: string, message: string) {
    super(`[${code}] ${message}`);
  }
}

export function encodeFrame(message: WireMessage): Buffer {
  const payload = Buffer.from(JSON.stringify(message), 'utf8');
  if (payload.length > MAX_FRAME_BYTES) {
    throw new FramingError('oversize_frame', `payload of ${payload.length} bytes`);
  }
  const header = Buffer.alloc(4);
  header.writeUInt32LE(payload.length, 0);
  return Buffer.concat([header, payload]);
}

/** Incremental frame parser over a growing byte stream. */
export class FrameBuffer {
  private pending: Buffer = Buffer.alloc(0);

  push(chunk: Buffer): void {
    this.pending = this.pending.length === 0 ? chunk : Buffer.concat([this.pending, chunk]);
  }

  /** Decode the next complete message, or return null if more bytes are needed. */
  next(): WireMessage | null {
    if (this.pending.length < 4) return null;
    const length = this.pending.readUInt32LE(0);
    if (length > MAX_FRAME_BYTES) {
      throw new FramingError('oversize_frame', `declared payload of ${length} bytes`);
    }
    if (this.pending.length < 4 + length) return null;
    const payload = this.pending.subarray(4, 4 + length);
    this.pending = this.pending.subarray(4 + length);
    let parsed: unknown;
    try {
      parsed = JSON.parse(payload.toString('utf8'));
    } catch (err) {
      throw new FramingError('malformed_json', String(err));
    }
    if (typeof parsed !== 'object' || parsed === null || Array.isArray(parsed)) {
      throw new FramingError('malformed_json', 'payload is not a JSON object');
    }
    const message = parsed as WireMessage;
    if (typeof message.type !== 'string') {
      throw new FramingError('missing_field', "payload missing 'type'");
    }
    return message;
  }

  bytesBuffered(): number {
    return this.pending.length;
  }
}
