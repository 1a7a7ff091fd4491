"""
Synthetic corpus service for the entity classification package.
Generates ID-card-like documents from layout templates: one value per unique
field next to its key, plus key/others distractors. In hop-sensitive documents
a misleading key is planted between each date value and its real key.
"""

import logging
from dataclasses import replace

import numpy as np

from app.services.dataset import Document, Entity
from app.services.geometry import BBox, normalize_document, pairwise_sigma
from app.services.graph import build_knn_graph, hop_distances
from app.utils.errors import InvalidInputError
from app.utils.schema import default_schema

logger = logging.getLogger(__name__)

# Key texts per field, one column per language
KEY_TEXTS = {
    'last_name': ('Surname', 'Nom', 'Familienname', 'Apellidos'),
    'first_name': ('Given names', 'Prénoms', 'Vornamen', 'Nombre'),
    'date_of_birth': ('Date of birth', 'Date de naissance', 'Geburtsdatum', 'Fecha de nacimiento'),
    'date_of_issue': ('Date of issue', 'Date de délivrance', 'Ausstellungsdatum', 'Fecha de expedición'),
    'date_of_expiry': ('Date of expiry', "Date d'expiration", 'Gültig bis', 'Válido hasta'),
    'id_number': ('Document No.', 'N° du document', 'Ausweisnummer', 'Núm. soporte'),
}

EXTRA_FIELDS = (
    (('Sex', 'Sexe', 'Geschlecht', 'Sexo'), ('M', 'F')),
    (('Nationality', 'Nationalité', 'Staatsangehörigkeit', 'Nacionalidad'), ('UTO', 'D', 'FRA', 'ESP')),
    (('Place of birth', 'Lieu de naissance', 'Geburtsort', 'Lugar de nacimiento'), ('BERLIN', 'LYON', 'MADRID', 'LEEDS')),
    (('Height', 'Taille', 'Größe', 'Altura'), ('1.68 m', '1.75 m', '1.82 m')),
)

HEADERS = ('IDENTITY CARD', "CARTE D'IDENTITÉ", 'PERSONALAUSWEIS', 'DOCUMENTO NACIONAL DE IDENTIDAD')

NAMES = (
    'MUSTERMANN', 'ERIKA', 'MARTIN', 'SOPHIE', 'GARCIA', 'LUCIA', 'SMITH', 'JOHN', 'DUBOIS', 'CLAIRE',
    'SCHMIDT', 'HANS', 'LOPEZ', 'PABLO', 'BROWN', 'EMMA', 'MOREAU', 'LOUIS', 'WEBER', 'ANNA',
)

NOISE = (
    'SPECIMEN', 'REPUBLIC', 'NATIONAL', 'Signature', 'IDUTO', 'P<UTO', '<<<<<<<<', 'CAN', 'Code',
    'Authority', 'Valid', '*', '/', 'EU', 'No.',
)

DATE_FORMATS = ('{d:02d}.{m:02d}.{y}', '{d:02d}/{m:02d}/{y}', '{y}-{m:02d}-{d:02d}', '{d:02d} {mon} {y}')
MONTHS = ('JAN', 'FEB', 'MAR', 'APR', 'MAY', 'JUN', 'JUL', 'AUG', 'SEP', 'OCT', 'NOV', 'DEC')

# Field block grid (pixels on the default 1000 x 630 page)
CELL_X = (290.0, 660.0)
CELL_Y = (130.0, 260.0, 390.0)
KEY_H = 20.0
VALUE_H = 24.0
GAP = 20.0
PLANT_W = 30.0


def _text_kind(name):
    if 'date' in name:
        return 'date'
    if 'name' in name:
        return 'name'
    if 'number' in name or name.endswith('_id') or name.startswith('id_'):
        return 'id'
    return 'word'


def _key_text(name, language):
    texts = KEY_TEXTS.get(name)
    if texts is None:
        return f"{name.replace('_', ' ').title()} ({language})"
    return texts[language % len(texts)]


def _date_text(rng, fmt, year_range):
    y = int(rng.integers(*year_range))
    m = int(rng.integers(1, 13))
    d = int(rng.integers(1, 29))
    return fmt.format(d=d, m=m, y=y, mon=MONTHS[m - 1])


def _value_text(name, rng, template):
    kind = _text_kind(name)
    if kind == 'date':
        years = {'date_of_birth': (1950, 2006), 'date_of_issue': (2010, 2023)}.get(name, (2020, 2036))
        return _date_text(rng, template['date_format'], years)
    if kind == 'name':
        return str(rng.choice(NAMES))
    if kind == 'id':
        prefix = chr(ord('A') + int(rng.integers(26))) if template['id_letter'] else ''
        return prefix + ''.join(str(int(c)) for c in rng.integers(0, 10, 8 if prefix else 9))
    return str(rng.choice(NOISE))


def _width(text, per_char, lo, hi):
    return float(np.clip(per_char * len(text), lo, hi))


def _make_template(gen_config, index, unique_names, seed):
    rng = np.random.default_rng([seed, index])
    cells = [(x, y) for y in CELL_Y for x in CELL_X]
    order = rng.permutation(len(cells))
    placement = {}
    for slot, name in enumerate(unique_names):
        if slot < len(cells):
            placement[name] = cells[order[slot]]
        else:
            # extra unique fields go in a second band under the grid
            placement[name] = (300.0 + 180.0 * ((slot - len(cells)) % 4), 500.0)
    return {
        'index': index,
        'tag': f"{gen_config.tag_prefix}{index}",
        'language': index % max(1, gen_config.languages),
        'placement': placement,
        'below': {name: bool(rng.random() < 0.5) for name in unique_names},
        'date_format': DATE_FORMATS[int(rng.integers(len(DATE_FORMATS)))],
        'id_letter': bool(rng.random() < 0.5),
    }


class _Page:
    """Collects boxes for one document before shuffling."""

    def __init__(self, gen_config, rng):
        self.config = gen_config
        self.rng = rng
        self.items = []
        self.sx = gen_config.page_w / 1000.0
        self.sy = gen_config.page_h / 630.0

    def add(self, x0, y0, w, h, text, category, jitter=True):
        dx, dy = self.rng.normal(0.0, self.config.jitter, 2) if jitter else (0.0, 0.0)
        x0 = float(np.clip((x0 + dx) * self.sx, 0.0, self.config.page_w - w * self.sx))
        y0 = float(np.clip((y0 + dy) * self.sy, 0.0, self.config.page_h - h * self.sy))
        box = BBox(round(x0, 2), round(y0, 2), round(x0 + w * self.sx, 2), round(y0 + h * self.sy, 2))
        self.items.append(Entity(bbox=box, text=text, category=category))
        return len(self.items) - 1


def is_hop_sensitive(doc, value_idx, key_idx, k=4):
    """
    Whether Euclidean proximity misleads for a key/value pair.

    True when the value's nearest neighbour (by centroid distance) is not its
    key while the key is still within 1-2 hops on the k-nearest-neighbour graph.
    """
    if not doc.normalized:
        doc = normalize_document(doc, doc.page_w, doc.page_h)
    dist = pairwise_sigma(doc).dist
    row = dist[value_idx].copy()
    row[value_idx] = np.inf
    nearest = int(np.argmin(row))
    phi = hop_distances(build_knn_graph(dist, k)).phi
    return nearest != key_idx and 1 <= phi[value_idx, key_idx] <= 2


def _generate_document(gen_config, template, doc_index, schema, seed, planted_fields, knn_k):
    rng = np.random.default_rng([seed, template['index'], doc_index + 1])
    page = _Page(gen_config, rng)
    language = template['language']
    unique_names = schema.unique_names
    key_category = 'key' if 'key' in schema.names else schema.names[schema.pad_index]
    other_category = schema.names[schema.pad_index]
    budget = gen_config.entities_per_doc
    hop_sensitive = bool(rng.random() < gen_config.hop_sensitive_fraction)

    pairs = []
    room_for_keys = budget - len(unique_names)
    for name in unique_names:
        x, y = template['placement'][name]
        value = _value_text(name, rng, template)
        value_w = _width(value, 10.0, 30.0, 200.0)
        has_key = room_for_keys > 0
        room_for_keys -= 1
        plant = has_key and hop_sensitive and name in planted_fields and room_for_keys > 0

        if not has_key:
            page.add(x, y, value_w, VALUE_H, value, name)
            continue

        key = _key_text(name, language)
        key_w = _width(key, 8.0, 40.0, 180.0)
        key_idx = page.add(x, y, key_w, KEY_H, key, key_category)
        if plant:
            # the planted box reads like the key of another date field
            decoys = [n for n in planted_fields if n != name]
            decoy_text = _key_text(decoys[int(rng.integers(len(decoys)))], language) if decoys else str(rng.choice(NOISE))

        if template['below'][name]:
            if plant:
                page.add(x + value_w / 2.0 - PLANT_W / 2.0, y + 26.0, PLANT_W, 18.0, decoy_text, key_category, jitter=False)
                room_for_keys -= 1
                value_idx = page.add(x, y + 50.0, value_w, VALUE_H, value, name, jitter=False)
            else:
                value_idx = page.add(x, y + 28.0, value_w, VALUE_H, value, name)
        else:
            start = x + key_w + GAP
            if plant:
                page.add(start, y, PLANT_W, 18.0, decoy_text, key_category, jitter=False)
                room_for_keys -= 1
                value_idx = page.add(start + PLANT_W + 12.0, y, value_w, VALUE_H, value, name, jitter=False)
            else:
                value_idx = page.add(start, y, value_w, VALUE_H, value, name)

        if plant:
            pairs.append((name, value_idx, key_idx))

    # extra key/value lines along the bottom band
    slot = 0
    while len(page.items) + 2 <= budget and slot < len(EXTRA_FIELDS):
        keys, options = EXTRA_FIELDS[slot]
        key = keys[language % len(keys)]
        x = 60.0 + 230.0 * slot
        page.add(x, 520.0, _width(key, 8.0, 40.0, 180.0), KEY_H, key, key_category)
        value = str(rng.choice(options))
        page.add(x, 548.0, _width(value, 10.0, 20.0, 180.0), VALUE_H, value, other_category)
        slot += 1

    if len(page.items) < budget:
        header = HEADERS[language % len(HEADERS)]
        page.add(300.0, 40.0, _width(header, 14.0, 80.0, 600.0), 30.0, header, other_category)

    # noise in the photo area and the machine-readable footer
    while len(page.items) < budget:
        text = str(rng.choice(NOISE))
        if rng.random() < 0.6:
            x, y = rng.uniform(30.0, 240.0), rng.uniform(120.0, 480.0)
        else:
            x, y = rng.uniform(30.0, 800.0), rng.uniform(585.0, 600.0)
        page.add(x, y, _width(text, 10.0, 10.0, 160.0), 18.0, text, other_category)

    order = rng.permutation(len(page.items))
    position = np.empty(len(order), dtype=np.int64)
    position[order] = np.arange(len(order))
    entities = tuple(page.items[i] for i in order)

    doc = Document(
        id=f"synth-{seed}-{template['index']:02d}-{doc_index:03d}",
        entities=entities,
        tag=template['tag'],
        page_w=gen_config.page_w,
        page_h=gen_config.page_h,
    )

    planted = [
        [int(position[value_idx]), int(position[key_idx])]
        for _, value_idx, key_idx in pairs
        if is_hop_sensitive(doc, int(position[value_idx]), int(position[key_idx]), knn_k)
    ]
    meta = {'hop_sensitive': bool(pairs) and len(planted) == len(pairs), 'planted': planted}
    return replace(doc, meta=meta)


def generate_synthetic(gen_config, seed=0, schema=None, knn_k=4):
    """
    Generate a deterministic synthetic corpus.

    Every document holds exactly one entity per unique category, its key
    (when room allows), key/value lines for non-field attributes and noise.
    With probability `hop_sensitive_fraction` a document gets a misleading
    key planted between each date value and its key.

    Args:
        gen_config (SynthConfig): Generator settings
        seed (int): Random seed; equal seeds give identical corpora
        schema (LabelSchema, optional): Categories, defaults to the ID-document schema
        knn_k (int): Neighbour count used by the hop-sensitivity check

    Returns:
        list of Document: templates * docs_per_template documents, pixel coordinates

    Raises:
        ConfigError: If entities_per_doc is smaller than the number of unique categories
    """
    schema = schema or default_schema()
    unique_names = schema.unique_names
    if not unique_names:
        raise InvalidInputError("Synthetic generation needs at least one unique category")
    gen_config.validate(num_unique=len(unique_names))

    planted_fields = [n for n in unique_names if _text_kind(n) == 'date']
    corpus = []
    for t in range(gen_config.templates):
        template = _make_template(gen_config, t, unique_names, seed)
        for d in range(gen_config.docs_per_template):
            corpus.append(_generate_document(gen_config, template, d, schema, seed, planted_fields, knn_k))

    sensitive = sum(1 for doc in corpus if doc.meta['hop_sensitive'])
    logger.info(
        f"Generated {len(corpus)} synthetic documents over {gen_config.templates} templates "
        f"({sensitive} hop-sensitive)"
    )
    return corpus
