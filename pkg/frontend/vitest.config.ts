import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    include: ["test/**/*.test.ts"],
    // The e2e suite spawns the Python review service once per file.
    hookTimeout: 30000,
  },
});
