import { defineConfig } from 'vitest/config';

const e2e = Boolean(process.env.RUN_E2E);

export default defineConfig({
  test: {
    environment: 'jsdom',
    include: ['test/**/*.test.ts'],
    exclude: e2e ? ['node_modules/**'] : ['test/e2e.test.ts', 'node_modules/**'],
    testTimeout: 600_000,
    hookTimeout: 600_000,
  },
});
