/**
 * Minimal binary STL reader used to validate exported artifacts:
 * 80-byte header, little-endian uint32 facet count, then 50-byte records
 * (12 float32: normal + three vertices, plus a 2-byte attribute).
 */

export interface StlSummary {
  triangleCount: number;
  enclosedVolume: number;
}

export function readBinaryStl(data: Buffer): StlSummary {
  if (data.length < 84) {
    throw new Error(`binary STL too short: ${data.length} bytes`);
  }
  const count = data.readUInt32LE(80);
  const expected = 84 + 50 * count;
  if (data.length !== expected) {
    throw new Error(`binary STL length mismatch: ${data.length} != ${expected}`);
  }
  // Signed tetrahedron sum; the absolute value is winding-independent.
  let signedVolume = 0;
  for (let i = 0; i < count; i++) {
    const base = 84 + 50 * i + 12; // skip the normal
    const v: number[][] = [];
    for (let corner = 0; corner < 3; corner++) {
      const at = base + corner * 12;
      v.push([data.readFloatLE(at), data.readFloatLE(at + 4), data.readFloatLE(at + 8)]);
    }
    const [a, b, c] = v;
    signedVolume +=
      (a[0] * (b[1] * c[2] - b[2] * c[1]) -
        a[1] * (b[0] * c[2] - b[2] * c[0]) +
        a[2] * (b[0] * c[1] - b[1] * c[0])) / 6.0;
  }
  return { triangleCount: count, enclosedVolume: Math.abs(signedVolume) };
}
