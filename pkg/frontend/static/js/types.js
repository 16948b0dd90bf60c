/** Payload shapes of the /v1 inspection API. The UI treats these as the
 *  single source of truth: values are displayed verbatim, never recomputed. */
export {};
