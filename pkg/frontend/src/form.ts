/*
 * Query form state: four article text areas, the language and model
 * selectors, the selected entity chips and the expected image count.
 * The submit button stays disabled while all four texts are empty.
 */

import { SOURCES, type SearchRequest, type Source } from './types.js'

export const MIN_K = 1
export const MAX_K = 100
export const DEFAULT_K = 9

export interface QueryFormState {
  texts: Record<Source, string>
  lang: string
  k: number
  entities: string[]
  model?: string
}

export function emptyForm (lang = 'de'): QueryFormState {
  return {
    texts: { caption: '', body: '', headline: '', lead: '' },
    lang,
    k: DEFAULT_K,
    entities: []
  }
}

/* True once at least one of the four text sources is non-blank. */
export function canSubmit (state: QueryFormState): boolean {
  return SOURCES.some(src => state.texts[src].trim() !== '')
}

/* The "number of images expected" control clamps into the API bounds. */
export function clampK (k: number): number {
  if (!Number.isFinite(k)) return DEFAULT_K
  return Math.min(MAX_K, Math.max(MIN_K, Math.round(k)))
}

export function toggleEntity (state: QueryFormState, entity: string): QueryFormState {
  const entities = state.entities.includes(entity)
    ? state.entities.filter(e => e !== entity)
    : [...state.entities, entity]
  return { ...state, entities }
}

export function toSearchRequest (state: QueryFormState): SearchRequest {
  const req: SearchRequest = {
    lang: state.lang,
    caption: state.texts.caption,
    body: state.texts.body,
    headline: state.texts.headline,
    lead: state.texts.lead,
    k: clampK(state.k),
    entities: state.entities
  }
  if (state.model !== undefined) req.model = state.model
  return req
}

/*
 * The submit path: an all-blank form produces no request at all (the
 * block happens client-side, nothing reaches the network layer).
 */
export function submitRequest (state: QueryFormState): SearchRequest | null {
  return canSubmit(state) ? toSearchRequest(state) : null
}
