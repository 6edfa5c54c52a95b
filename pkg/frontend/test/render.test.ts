import { describe, expect, it } from 'vitest'

import {
  gridColumns,
  renderAttention,
  renderAttentionPanel,
  renderEntityChips,
  renderError,
  renderResults
} from '../src/render.js'
import type { EntitiesResponse, SearchResponse } from '../src/types.js'
import { loadFixture } from './helpers.js'

const search = loadFixture<SearchResponse>('search.json')
const entities = loadFixture<EntitiesResponse>('entities.json')

function count (haystack: string, needle: string): number {
  return haystack.split(needle).length - 1
}

describe('gridColumns', () => {
  it('keeps the grid square-ish', () => {
    expect(gridColumns(1)).toBe(1)
    expect(gridColumns(2)).toBe(2)
    expect(gridColumns(4)).toBe(2)
    expect(gridColumns(5)).toBe(3)
    expect(gridColumns(9)).toBe(3)
    expect(gridColumns(10)).toBe(4)
    expect(gridColumns(100)).toBe(10)
  })
})

describe('renderResults', () => {
  it('renders a recorded k=9 response as a 3-column grid of 9 tiles', () => {
    expect(search.results).toHaveLength(9)
    const html = renderResults(search.results, 9)
    expect(count(html, '<figure')).toBe(9)
    expect(html).toContain('grid-template-columns: repeat(3, 1fr)')
  })

  it('shows each tile with its score and entity tags', () => {
    const html = renderResults(search.results, 9)
    for (const result of search.results) {
      expect(html).toContain(`data-image-id="${result.image_id}"`)
      expect(html).toContain(result.score.toFixed(3))
      for (const entity of result.entities) {
        expect(html).toContain(`<span class="chip">${entity}</span>`)
      }
    }
  })

  it('uses the image URL when present and a labeled placeholder otherwise', () => {
    const withUrl = search.results.find(r => r.image_url !== undefined)
    const withoutUrl = search.results.find(r => r.image_url === undefined)
    expect(withUrl).toBeDefined()
    expect(withoutUrl).toBeDefined()
    const html = renderResults(search.results, 9)
    expect(html).toContain(`<img src="${withUrl?.image_url}"`)
    expect(html).toContain(`<div class="placeholder">${withoutUrl?.image_id}</div>`)
  })
})

describe('renderEntityChips', () => {
  it('renders one selectable button per suggested entity', () => {
    const first = entities.entities[0] as string
    const html = renderEntityChips(entities.entities, [first])
    expect(count(html, '<button')).toBe(entities.entities.length)
    expect(html).toContain(`class="chip selected" data-entity="${first}"`)
    for (const entity of entities.entities.slice(1)) {
      expect(html).toContain(`class="chip" data-entity="${entity}"`)
    }
  })

  it('escapes markup inside entity names', () => {
    const html = renderEntityChips(['<x&>'], [])
    expect(html).toContain('&lt;x&amp;&gt;')
    expect(html).not.toContain('<x&>')
  })
})

describe('renderAttention', () => {
  it('wraps every token of a recorded source in a band span, order kept', () => {
    const tokens = search.attention.body ?? []
    expect(tokens.length).toBeGreaterThan(0)
    const html = renderAttention(tokens)
    expect(count(html, '<span class="band-')).toBe(tokens.length)
    const rendered = [...html.matchAll(/<span class="band-\w+">([^<]*)<\/span>/g)].map(m => m[1])
    expect(rendered).toEqual(tokens.map(t => t.token))
  })

  it('renders one section per source in the panel', () => {
    const html = renderAttentionPanel(search.attention)
    for (const src of Object.keys(search.attention)) {
      expect(html).toContain(`data-source="${src}"`)
    }
  })
})

describe('renderError', () => {
  it('tags the message with the machine-readable code', () => {
    const html = renderError('empty_query', 'at least one text is required')
    expect(html).toContain('data-code="empty_query"')
    expect(html).toContain('at least one text is required')
  })
})
