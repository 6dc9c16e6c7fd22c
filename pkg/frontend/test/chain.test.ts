import { createHash } from "node:crypto";
import { describe, expect, it } from "vitest";

import { verifyChain } from "../src/chain";
import type { LedgerEntry } from "../src/types";

// Build a genuine chain the same way the server does.
function makeChain(payloads: string[]): LedgerEntry[] {
  let prev = Buffer.alloc(32);
  return payloads.map((text, sequence) => {
    const hash = createHash("sha256")
      .update(Buffer.concat([prev, Buffer.from(text, "utf-8")]))
      .digest();
    const entry: LedgerEntry = {
      sequence,
      prev_hash_hex: prev.toString("hex"),
      payload_text: text,
      entry_hash_hex: hash.toString("hex"),
      payload: { payload_kind: "audit", kind: "x", timestamp: "", tick: 0, data: {}, trace_ids: [] },
    };
    prev = hash;
    return entry;
  });
}

describe("verifyChain", () => {
  it("accepts an intact chain", async () => {
    const chain = makeChain(['{"a":1}', '{"b":2}', '{"c":3}']);
    const verdict = await verifyChain(chain);
    expect(verdict.ok).toBe(true);
    expect(verdict.checked).toBe(3);
  });

  it("flags a payload mutation at its sequence", async () => {
    const chain = makeChain(['{"a":1}', '{"b":2}', '{"c":3}']);
    chain[1] = { ...chain[1], payload_text: '{"b":99}' };
    const verdict = await verifyChain(chain);
    expect(verdict.ok).toBe(false);
    expect(verdict.firstBadSequence).toBe(1);
  });

  it("flags reordering at the first moved index", async () => {
    const chain = makeChain(['{"a":1}', '{"b":2}', '{"c":3}']);
    [chain[0], chain[1]] = [chain[1], chain[0]];
    const verdict = await verifyChain(chain);
    expect(verdict.firstBadSequence).toBe(0);
  });

  it("flags a gap left by deletion", async () => {
    const chain = makeChain(['{"a":1}', '{"b":2}', '{"c":3}']);
    chain.splice(1, 1);
    const verdict = await verifyChain(chain);
    expect(verdict.firstBadSequence).toBe(1);
  });

  it("accepts the empty prefix", async () => {
    expect((await verifyChain([])).ok).toBe(true);
  });
});
