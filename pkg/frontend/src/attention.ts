/*
 * Per-token attention coloring.  Attention decreases in the order
 * red, orange, yellow, black; bands are assigned by descending-score
 * quantiles within one source: the top 10% of tokens turn red, the
 * next 15% orange, the next 25% yellow and the rest stay black.
 * Ties resolve by token position, so the assignment is deterministic.
 */

import type { AttentionToken } from './types.js'

export type Band = 'red' | 'orange' | 'yellow' | 'black'

export interface AttentionBand {
  token: string
  score: number
  band: Band
}

const RED_CUT = 0.1
const ORANGE_CUT = 0.25 // cumulative: 10% + 15%
const YELLOW_CUT = 0.5 // cumulative: 10% + 15% + 25%

function bandForRank (rank: number, total: number): Band {
  const frac = rank / total
  if (frac < RED_CUT) return 'red'
  if (frac < ORANGE_CUT) return 'orange'
  if (frac < YELLOW_CUT) return 'yellow'
  return 'black'
}

/*
 * assignBands maps every token to its color band, preserving the
 * input (reading) order.  A single token lands in the top quantile
 * and comes back red; equal scores keep their relative text order in
 * the ranking, so repeated calls give identical output.
 */
export function assignBands (tokens: AttentionToken[]): AttentionBand[] {
  const order = tokens.map((t, i) => ({ score: t.score, position: i }))
  order.sort((a, b) => (b.score - a.score) || (a.position - b.position))
  const bands: Band[] = new Array(tokens.length)
  order.forEach((entry, rank) => {
    bands[entry.position] = bandForRank(rank, tokens.length)
  })
  return tokens.map((t, i) => ({ token: t.token, score: t.score, band: bands[i] as Band }))
}
