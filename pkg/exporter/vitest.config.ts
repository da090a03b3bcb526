import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // Full-resolution exports run a real (if small) encoder; give them room.
    testTimeout: 180_000,
    hookTimeout: 180_000,
  },
});
