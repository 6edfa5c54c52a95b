/*
 * JSON shapes of the retrieval service API, mirrored 1:1 so the
 * contract tests can validate recorded responses against them.
 */

export const SOURCES = ['caption', 'body', 'headline', 'lead'] as const

export type Source = (typeof SOURCES)[number]

export interface SearchRequest {
  lang: string
  caption?: string
  body?: string
  headline?: string
  lead?: string
  k?: number
  entities?: string[]
  model?: string
}

export interface SearchResult {
  image_id: string
  score: number
  entities: string[]
  image_url?: string
}

export interface AttentionToken {
  token: string
  score: number
}

export interface SearchResponse {
  results: SearchResult[]
  attention: Partial<Record<Source, AttentionToken[]>>
  snapshot: string
}

export interface EntitiesResponse {
  entities: string[]
  snapshot: string
}

export interface ModelInfo {
  snapshot: string
  default: boolean
  languages: string[]
  sources: string[]
  images: number
}

export interface ModelsResponse {
  models: ModelInfo[]
}

/* Error body the service returns with any non-200 status. */
export interface ApiErrorBody {
  code: string
  message: string
}
