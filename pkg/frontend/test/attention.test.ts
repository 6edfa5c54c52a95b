import { describe, expect, it } from 'vitest'

import { assignBands, type Band } from '../src/attention.js'
import type { AttentionToken, SearchResponse, Source } from '../src/types.js'
import { loadFixture } from './helpers.js'

function tokens (scores: number[]): AttentionToken[] {
  return scores.map((score, i) => ({ token: `t${i}`, score }))
}

function countBands (bands: { band: Band }[]): Record<Band, number> {
  const counts: Record<Band, number> = { red: 0, orange: 0, yellow: 0, black: 0 }
  for (const b of bands) counts[b.band] += 1
  return counts
}

describe('assignBands', () => {
  it('splits 20 tokens into 2 red / 3 orange / 5 yellow / 10 black', () => {
    const scores = Array.from({ length: 20 }, (_, i) => 20 - i)
    const bands = assignBands(tokens(scores))
    expect(countBands(bands)).toEqual({ red: 2, orange: 3, yellow: 5, black: 10 })
    expect(bands.slice(0, 2).map(b => b.band)).toEqual(['red', 'red'])
    expect(bands.slice(2, 5).map(b => b.band)).toEqual(['orange', 'orange', 'orange'])
    expect(bands.slice(5, 10).every(b => b.band === 'yellow')).toBe(true)
    expect(bands.slice(10).every(b => b.band === 'black')).toBe(true)
  })

  it('bands follow score rank, not reading position', () => {
    const scores = Array.from({ length: 20 }, (_, i) => 20 - i)
    const shuffled = [...tokens(scores)].reverse()
    const bands = assignBands(shuffled)
    // Output preserves the (reversed) input order...
    expect(bands.map(b => b.token)).toEqual(shuffled.map(t => t.token))
    // ...while the two highest scores are red wherever they sit.
    expect(bands[19]?.band).toBe('red')
    expect(bands[18]?.band).toBe('red')
    expect(bands[0]?.band).toBe('black')
    expect(countBands(bands)).toEqual({ red: 2, orange: 3, yellow: 5, black: 10 })
  })

  it('breaks ties by token position, deterministically', () => {
    const flat = tokens(new Array(20).fill(0.05))
    const first = assignBands(flat)
    const second = assignBands(flat)
    expect(second).toEqual(first)
    // With all scores equal the earliest tokens take the hot bands.
    expect(first.slice(0, 2).every(b => b.band === 'red')).toBe(true)
    expect(first.slice(2, 5).every(b => b.band === 'orange')).toBe(true)
    expect(first.slice(5, 10).every(b => b.band === 'yellow')).toBe(true)
    expect(first.slice(10).every(b => b.band === 'black')).toBe(true)
  })

  it('colors a single token red', () => {
    const bands = assignBands([{ token: 'only', score: 1 }])
    expect(bands).toEqual([{ token: 'only', score: 1, band: 'red' }])
  })

  it('returns an empty list for no tokens', () => {
    expect(assignBands([])).toEqual([])
  })

  it('rounds quantiles down when counts do not divide evenly', () => {
    // Ranks of 7: 0/7 red, 1/7 orange, 2/7 + 3/7 yellow, rest black.
    const bands = assignBands(tokens([7, 6, 5, 4, 3, 2, 1]))
    expect(bands.map(b => b.band)).toEqual([
      'red', 'orange', 'yellow', 'yellow', 'black', 'black', 'black'
    ])
  })

  it('covers every token of a recorded response with a valid band', () => {
    const fixture = loadFixture<SearchResponse>('search.json')
    const valid = new Set<Band>(['red', 'orange', 'yellow', 'black'])
    const sources = Object.keys(fixture.attention) as Source[]
    expect(sources.length).toBeGreaterThan(0)
    for (const src of sources) {
      const toks = fixture.attention[src] ?? []
      const bands = assignBands(toks)
      expect(bands).toHaveLength(toks.length)
      expect(bands.every(b => valid.has(b.band))).toBe(true)
      expect(bands.some(b => b.band === 'red')).toBe(true)
      expect(bands.map(b => b.token)).toEqual(toks.map(t => t.token))
    }
  })
})
