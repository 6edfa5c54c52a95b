/*
 * Thin client over the retrieval service's JSON API.  The service
 * reports failures as `{code, message}` bodies; those surface here as
 * ApiError so the UI can route them (empty_query -> inline validation,
 * unknown_model -> flag the model selector, anything network-shaped ->
 * retry banner).
 *
 * Only one search may be in flight: starting a new one aborts the
 * previous request (latest wins).
 */

import type {
  ApiErrorBody,
  EntitiesResponse,
  ModelsResponse,
  SearchRequest,
  SearchResponse
} from './types.js'

export class ApiError extends Error {
  readonly code: string

  constructor (code: string, message: string) {
    super(message)
    this.code = code
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>

async function readError (response: Response): Promise<ApiError> {
  try {
    const body = (await response.json()) as ApiErrorBody
    return new ApiError(body.code, body.message)
  } catch {
    return new ApiError('bad_response', `HTTP ${response.status}`)
  }
}

export class ApiClient {
  private readonly baseUrl: string
  private readonly fetchImpl: FetchLike
  private inflight: AbortController | null = null

  constructor (baseUrl = '', fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/$/, '')
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init))
  }

  private async post<T> (path: string, body: unknown, signal?: AbortSignal): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
      signal
    })
    if (!response.ok) throw await readError(response)
    return (await response.json()) as T
  }

  /* POST /search with latest-wins cancellation. */
  async search (request: SearchRequest): Promise<SearchResponse> {
    this.inflight?.abort()
    const controller = new AbortController()
    this.inflight = controller
    try {
      return await this.post<SearchResponse>('/search', request, controller.signal)
    } finally {
      if (this.inflight === controller) this.inflight = null
    }
  }

  /*
   * POST /entities on text blur.  Network trouble hides the chips but
   * must not block searching, so it resolves to null instead of
   * throwing.
   */
  async entities (request: SearchRequest): Promise<EntitiesResponse | null> {
    try {
      return await this.post<EntitiesResponse>('/entities', request)
    } catch {
      return null
    }
  }

  async models (): Promise<ModelsResponse> {
    const response = await this.fetchImpl(this.baseUrl + '/models')
    if (!response.ok) throw await readError(response)
    return (await response.json()) as ModelsResponse
  }
}
