/*
 * Browser entry point: wires the static page in index.html to the API
 * client.  All rendering goes through the pure functions in render.ts
 * so behavior stays testable without a DOM.
 */

import { ApiClient, ApiError } from './api.js'
import {
  canSubmit,
  clampK,
  emptyForm,
  submitRequest,
  toSearchRequest,
  toggleEntity,
  type QueryFormState
} from './form.js'
import {
  renderAttentionPanel,
  renderEntityChips,
  renderError,
  renderResults
} from './render.js'
import { SOURCES } from './types.js'

export function mount (root: Document, client: ApiClient): void {
  let state: QueryFormState = emptyForm()

  const $ = (id: string) => root.getElementById(id)
  const results = $('results')
  const attention = $('attention')
  const chips = $('chips')
  const status = $('status')
  const submit = $('submit') as HTMLButtonElement | null
  const modelSelect = $('model')
  if (!results || !attention || !chips || !status || !submit) return

  const sync = () => {
    submit.disabled = !canSubmit(state)
    chips.innerHTML = renderEntityChips(state.entities, state.entities)
  }

  for (const src of SOURCES) {
    const area = $(src) as HTMLTextAreaElement | null
    if (!area) continue
    area.addEventListener('input', () => {
      state.texts[src] = area.value
      sync()
    })
    area.addEventListener('blur', async () => {
      const found = await client.entities(toSearchRequest(state))
      // Network trouble hides the chips; searching stays possible.
      chips.innerHTML = found
        ? renderEntityChips(found.entities, state.entities)
        : renderEntityChips(state.entities, state.entities)
    })
  }

  const kInput = $('k') as HTMLInputElement | null
  kInput?.addEventListener('change', () => {
    state.k = clampK(Number(kInput.value))
    kInput.value = String(state.k)
  })
  const langSelect = $('lang') as HTMLSelectElement | null
  langSelect?.addEventListener('change', () => {
    state.lang = langSelect.value
  })
  ;(modelSelect as HTMLSelectElement | null)?.addEventListener('change', () => {
    state.model = (modelSelect as HTMLSelectElement).value || undefined
  })

  chips.addEventListener('click', event => {
    const target = event.target as HTMLElement
    const entity = target.dataset?.entity
    if (!entity) return
    state = toggleEntity(state, entity)
    sync()
  })

  submit.addEventListener('click', async () => {
    const request = submitRequest(state)
    if (!request) return // empty form: blocked before any network call
    status.innerHTML = ''
    modelSelect?.classList.remove('flagged')
    try {
      const response = await client.search(request)
      results.innerHTML = renderResults(response.results, clampK(state.k))
      attention.innerHTML = renderAttentionPanel(response.attention)
    } catch (err) {
      if (err instanceof ApiError) {
        if (err.code === 'unknown_model') modelSelect?.classList.add('flagged')
        status.innerHTML = renderError(err.code, err.message)
      } else if ((err as Error).name !== 'AbortError') {
        status.innerHTML = renderError('network', 'Request failed — retry')
      }
    }
  })

  sync()
}

if (typeof document !== 'undefined') {
  mount(document, new ApiClient(''))
}
