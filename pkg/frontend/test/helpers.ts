/*
 * Fixture loading for the contract tests.  The JSON files under
 * test/fixtures/ are recorded verbatim from the retrieval service so
 * the renderers are exercised against real response shapes.
 */

import { readFileSync } from 'node:fs'

export function loadFixture<T> (name: string): T {
  const url = new URL(`./fixtures/${name}`, import.meta.url)
  return JSON.parse(readFileSync(url, 'utf8')) as T
}
