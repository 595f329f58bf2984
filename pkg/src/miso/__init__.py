"""MISO: a privacy-preserving single sign-on mixer.

The mixer nests two OAuth 2.0 authorization-code flows: toward identity
providers it acts as a relying party, toward relying parties it acts as an
identity provider. User identifiers are blinded with a keyed PRF and
per-user salts inside a simulated attested enclave, so no party besides
the mixer ever sees both sides of a login.
"""

__version__ = "0.1.0"
