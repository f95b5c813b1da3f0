import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    testTimeout: 300_000,
    hookTimeout: 120_000,
    // each file owns one backend process; run files one at a time
    fileParallelism: false,
  },
});
