"""
ConfProbe Web Routes
Serves a synthetic model over the /predict protocol
"""

import base64
import binascii

import numpy as np
from flask import Blueprint, jsonify, request, current_app

from . import __version__
from . import activity

main = Blueprint('main', __name__)


def _oracle():
    return current_app.config.get('ORACLE')


@main.route('/predict', methods=['POST'])
def predict():
    """Top-1 label for one float32 image"""
    oracle = _oracle()
    if oracle is None:
        return jsonify({'error': 'No model loaded'}), 503

    data = request.get_json(silent=True) or {}
    shape = data.get('shape')
    encoded = data.get('pixels_b64')
    if not isinstance(shape, list) or len(shape) != 3 or not isinstance(encoded, str):
        return jsonify({'error': "Request needs 'shape' [H, W, C] and 'pixels_b64'"}), 400

    try:
        raw = base64.b64decode(encoded, validate=True)
        pixels = np.frombuffer(raw, dtype='<f4').reshape([int(d) for d in shape])
    except (binascii.Error, ValueError, TypeError) as e:
        return jsonify({'error': f'Bad payload: {e}'}), 400

    if oracle.shape is not None and tuple(pixels.shape) != tuple(oracle.shape):
        return jsonify({'error': f'Expected shape {list(oracle.shape)}'}), 400

    label = oracle.top1(pixels.astype(np.float64))
    return jsonify({'label': int(label)})


@main.route('/api/status')
def api_status():
    """Server version and the model's input shape"""
    oracle = _oracle()
    model = getattr(oracle, 'model', None)
    return jsonify({
        'version': __version__,
        'shape': list(oracle.shape) if oracle is not None and oracle.shape else None,
        'num_classes': model.num_classes if model is not None else None,
    })


@main.route('/api/activity-log', methods=['GET', 'DELETE'])
def api_activity_log():
    """Get or clear activity log entries"""
    if request.method == 'DELETE':
        activity.clear_activity_log()
        return jsonify({'success': True})

    lines = activity.get_recent_activity(100)
    lines.reverse()  # Newest first
    return jsonify({'log': lines})


@main.route('/api/run-history')
def api_run_history():
    """Finished CLI runs, newest first"""
    runs = activity.load_run_history()
    runs.sort(key=lambda x: x.get('completed_at', ''), reverse=True)
    return jsonify({'runs': runs})
