/*
 * Pure HTML-string renderers; the contract tests drive these with
 * recorded service responses.  Results come back as a square-ish grid
 * (k=9 renders 3x3), each tile showing the image (or a placeholder
 * carrying the image id when no URL is known), the score and the
 * image's entity tags.
 */

import { assignBands, type AttentionBand } from './attention.js'
import type { AttentionToken, SearchResult, Source } from './types.js'

function escapeHtml (text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;')
}

export function gridColumns (k: number): number {
  return Math.max(1, Math.ceil(Math.sqrt(k)))
}

function renderTile (result: SearchResult): string {
  const image = result.image_url
    ? `<img src="${escapeHtml(result.image_url)}" alt="${escapeHtml(result.image_id)}">`
    : `<div class="placeholder">${escapeHtml(result.image_id)}</div>`
  const chips = result.entities
    .map(e => `<span class="chip">${escapeHtml(e)}</span>`)
    .join('')
  return (
    `<figure class="tile" data-image-id="${escapeHtml(result.image_id)}">` +
    image +
    `<figcaption><span class="score">${result.score.toFixed(3)}</span>${chips}</figcaption>` +
    '</figure>'
  )
}

export function renderResults (results: SearchResult[], k: number): string {
  const tiles = results.map(renderTile).join('')
  return `<div class="grid" style="grid-template-columns: repeat(${gridColumns(k)}, 1fr)">${tiles}</div>`
}

/* Selectable entity chips suggested by POST /entities. */
export function renderEntityChips (entities: string[], selected: string[]): string {
  return entities
    .map(e => {
      const cls = selected.includes(e) ? 'chip selected' : 'chip'
      return `<button type="button" class="${cls}" data-entity="${escapeHtml(e)}">${escapeHtml(e)}</button>`
    })
    .join('')
}

/* One source's query text with its per-token color band, order kept. */
export function renderAttention (tokens: AttentionToken[]): string {
  return assignBands(tokens)
    .map((b: AttentionBand) => `<span class="band-${b.band}">${escapeHtml(b.token)}</span>`)
    .join(' ')
}

export function renderAttentionPanel (
  attention: Partial<Record<Source, AttentionToken[]>>
): string {
  return Object.entries(attention)
    .map(([src, tokens]) =>
      `<section class="attention" data-source="${src}">${renderAttention(tokens ?? [])}</section>`
    )
    .join('')
}

export function renderError (code: string, message: string): string {
  return `<p class="error" data-code="${escapeHtml(code)}">${escapeHtml(message)}</p>`
}
