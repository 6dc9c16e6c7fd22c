// Hash-chain verification over fetched ledger entries, mirroring the
// server's scheme: entry_hash = SHA-256(prev_hash_bytes || payload_bytes),
// genesis prev is 32 zero bytes, sequences increase by one.

import type { LedgerEntry } from "./types";

const GENESIS = "0".repeat(64);

function hexToBytes(hex: string): Uint8Array {
  const out = new Uint8Array(hex.length / 2);
  for (let i = 0; i < out.length; i++) {
    out[i] = parseInt(hex.slice(i * 2, i * 2 + 2), 16);
  }
  return out;
}

function bytesToHex(bytes: ArrayBuffer): string {
  return Array.from(new Uint8Array(bytes))
    .map((b) => b.toString(16).padStart(2, "0"))
    .join("");
}

async function sha256(data: Uint8Array): Promise<string> {
  const digest = await crypto.subtle.digest("SHA-256", data.slice().buffer as ArrayBuffer);
  return bytesToHex(digest);
}

export interface ChainVerdict {
  ok: boolean;
  checked: number;
  firstBadSequence: number | null;
}

/** Recompute every link of a fetched prefix; any mutation, reorder, or gap
 * surfaces as the first bad sequence. */
export async function verifyChain(entries: LedgerEntry[]): Promise<ChainVerdict> {
  let prev = GENESIS;
  const encoder = new TextEncoder();
  for (let i = 0; i < entries.length; i++) {
    const entry = entries[i];
    if (entry.sequence !== i || entry.prev_hash_hex !== prev) {
      return { ok: false, checked: i, firstBadSequence: i };
    }
    const payload = encoder.encode(entry.payload_text);
    const material = new Uint8Array(32 + payload.length);
    material.set(hexToBytes(entry.prev_hash_hex), 0);
    material.set(payload, 32);
    const digest = await sha256(material);
    if (digest !== entry.entry_hash_hex) {
      return { ok: false, checked: i, firstBadSequence: i };
    }
    prev = entry.entry_hash_hex;
  }
  return { ok: true, checked: entries.length, firstBadSequence: null };
}
