import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { Lesionkit } from "../src/binding.js";
import { makeRng, randomMask, randomProbs, view } from "./helpers.js";

// full 1e4 sweep: LESIONKIT_LEAK_N=10000 npx vitest run tests/leak.test.ts
const N_CALLS = Number(process.env.LESIONKIT_LEAK_N ?? 2000);

let binding: Lesionkit;

beforeAll(() => {
  binding = new Lesionkit();
});

afterAll(() => {
  binding.close();
});

describe("repeated-call stability", () => {
  it(`backend memory stays flat across ${N_CALLS} calls`, () => {
    const rng = makeRng(0xabcd);
    const dims: [number, number, number] = [4, 4, 4];
    const p = randomProbs(rng, 64);
    const g = randomMask(rng, 64);
    const pv = view(p, dims);
    const gv = view(g, dims);

    // warm up allocator pools before measuring
    for (let i = 0; i < 100; i++) {
      binding.lossForwardBackward("l1dfl", pv, gv);
    }
    const rss0 = binding.backendRssKb();
    const first = binding.lossForwardBackward("l1dfl", pv, gv).value;
    expect(Number.isFinite(first)).toBe(true);
    for (let i = 1; i < N_CALLS; i++) {
      const value = binding.lossForwardBackward("l1dfl", pv, gv).value;
      if (value !== first) {
        // identical inputs must give identical values
        expect(value).toBe(first);
      }
    }
    const rss1 = binding.backendRssKb();
    const growthKb = rss1 - rss0;
    expect(growthKb).toBeLessThan(30_000);
  }, 600_000);
});
