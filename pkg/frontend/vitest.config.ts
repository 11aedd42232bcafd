import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    globalSetup: ["tests/global_setup.ts"],
    // Round-trip tests talk to a live backend; detection refreshes there
    // retrain nothing but do rescan whole spots.
    testTimeout: 120_000,
    hookTimeout: 240_000,
  },
});
